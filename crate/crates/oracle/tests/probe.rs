//! Parameter probe for picking fixture seeds with rich loop dynamics.
//! Run manually: cargo test -p tta-oracle --test probe -- --ignored --nocapture

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_oracle::{run_reference, Fixture, RefNorm};

fn rmat(rng: &mut ChaCha8Rng, r: usize, cc: usize, s: f64) -> Vec<Vec<f64>> {
    (0..r)
        .map(|_| (0..cc).map(|_| rng.gen_range(-s..s)).collect())
        .collect()
}

fn rvec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn make(seed: u64, norm: RefNorm, alpha: f64, factor: f64, lr: f64, rows: usize) -> Fixture {
    let (d_in, h1, h2, c) = (3, 5, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = rmat(&mut rng, d_in, h1, 0.9);
    let b1 = rvec(&mut rng, h1, -0.2, 0.2);
    let gamma1 = rvec(&mut rng, h1, 0.8, 1.2);
    let beta1 = rvec(&mut rng, h1, -0.2, 0.2);
    let w2 = rmat(&mut rng, h1, h2, 0.9);
    let b2 = rvec(&mut rng, h2, -0.2, 0.2);
    let gamma2 = rvec(&mut rng, h2, 0.8, 1.2);
    let beta2 = rvec(&mut rng, h2, -0.2, 0.2);
    let w3 = rmat(&mut rng, h2, c, 0.9);
    let b3 = rvec(&mut rng, c, -0.2, 0.2);
    let x = rmat(&mut rng, rows, d_in, 2.0);
    Fixture {
        name: "probe",
        d_in,
        h1,
        h2,
        c,
        rows,
        norm,
        alpha,
        entropy_factor: factor,
        lr_shallow: lr,
        lr_adapt: lr,
        momentum: 0.9,
        max_iters: 2,
        w1,
        b1,
        gamma1,
        beta1,
        w2,
        b2,
        gamma2,
        beta2,
        w3,
        b3,
        x,
    }
}

#[test]
#[ignore]
fn movement() {
    // How far does one round move the entropies?
    for &lr in &[0.1, 0.5, 1.0] {
        let fx = make(3, RefNorm::Batch, 0.5, 0.95, lr, 10);
        let r = run_reference(&fx);
        println!("lr={lr} rounds={}", r.selections.len() - 1);
        for (step, e) in r.entropies.iter().enumerate() {
            let strs: Vec<String> = e.iter().map(|v| format!("{v:.4}")).collect();
            println!("  e[{step}] = {}", strs.join(" "));
        }
        println!("  e0 = {:.4}", 0.95 * 4f64.ln());
    }
}

#[test]
#[ignore]
fn scan() {
    for &norm in &[RefNorm::Batch, RefNorm::Layer] {
        for seed in 0..60u64 {
            for &factor in &[0.85, 0.9, 0.95, 1.0] {
                for &lr in &[0.3, 0.6, 1.0] {
                    let fx = make(seed, norm, 0.5, factor, lr, 10);
                    let r = run_reference(&fx);
                    let rounds = r.selections.len() - 1;
                    if rounds >= 2 && !r.prs.is_empty() {
                        println!(
                            "norm={norm:?} seed={seed} factor={factor} lr={lr}: rounds={rounds} s0={} sf={} prs={:?}",
                            r.selections[0].len(),
                            r.selections.last().unwrap().len(),
                            r.prs
                        );
                    }
                }
            }
        }
    }
}
