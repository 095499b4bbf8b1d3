//! Straight-line reference computation for one adaptation stream.
//!
//! This crate exists only as a test oracle: it recomputes the full per-batch
//! adaptation procedure (fused prediction, entropy selection, the two
//! objective gradients, momentum SGD, re-selection, termination) directly
//! from the defining formulas on plain `Vec<Vec<f64>>` values, with no code
//! shared with the engine under test. The fixture architecture is fixed:
//!
//!   shallow: dense(d_in -> h1) -> norm(h1) -> relu
//!   branch:  dense(h1 -> h2)  -> norm(h2) -> relu -> dense(h2 -> c)
//!
//! The branch exists twice with identical initial values: a frozen copy and
//! an adapted copy whose norm gamma/beta are trained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefNorm {
    Batch,
    Layer,
}

/// Raw parameter and input values for one pinned fixture.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: &'static str,
    pub d_in: usize,
    pub h1: usize,
    pub h2: usize,
    pub c: usize,
    pub rows: usize,
    pub norm: RefNorm,
    pub alpha: f64,
    pub entropy_factor: f64,
    pub lr_shallow: f64,
    pub lr_adapt: f64,
    pub momentum: f64,
    pub max_iters: usize,
    // shallow segment
    pub w1: Vec<Vec<f64>>, // d_in x h1
    pub b1: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    // branch template (both copies start from these values)
    pub w2: Vec<Vec<f64>>, // h1 x h2
    pub b2: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub beta2: Vec<f64>,
    pub w3: Vec<Vec<f64>>, // h2 x c
    pub b3: Vec<f64>,
    // batch
    pub x: Vec<Vec<f64>>, // rows x d_in
}

/// Final values after running the reference procedure on one batch.
#[derive(Clone, Debug)]
pub struct RefResult {
    /// Selected index set at iteration 0 and after each round.
    pub selections: Vec<Vec<usize>>,
    /// Entropies per selection step.
    pub entropies: Vec<Vec<f64>>,
    pub prs: Vec<usize>,
    pub final_fused: Vec<Vec<f64>>,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub gamma2_adapt: Vec<f64>,
    pub beta2_adapt: Vec<f64>,
    pub forward_count: usize,
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let k = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for kk in 0..k {
            let v = a[i][kk];
            for j in 0..m {
                out[i][j] += v * b[kk][j];
            }
        }
    }
    out
}

fn add_bias(z: &mut [Vec<f64>], b: &[f64]) {
    for row in z.iter_mut() {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = a[0].len();
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..n {
        for j in 0..m {
            out[j][i] = a[i][j];
        }
    }
    out
}

struct NormVals {
    out: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    // batch: per-column; layer: per-row
    var: Vec<f64>,
}

fn norm_forward(z: &[Vec<f64>], gamma: &[f64], beta: &[f64], kind: RefNorm) -> NormVals {
    let n = z.len();
    let f = z[0].len();
    match kind {
        RefNorm::Batch => {
            let mut mean = vec![0.0; f];
            for row in z {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            let mut var = vec![0.0; f];
            for row in z {
                for j in 0..f {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in &mut var {
                *v /= n as f64;
            }
            let mut xhat = vec![vec![0.0; f]; n];
            let mut out = vec![vec![0.0; f]; n];
            for i in 0..n {
                for j in 0..f {
                    let inv = 1.0 / (var[j] + EPS).sqrt();
                    xhat[i][j] = (z[i][j] - mean[j]) * inv;
                    out[i][j] = gamma[j] * xhat[i][j] + beta[j];
                }
            }
            NormVals { out, xhat, var }
        }
        RefNorm::Layer => {
            let mut var = vec![0.0; n];
            let mut xhat = vec![vec![0.0; f]; n];
            let mut out = vec![vec![0.0; f]; n];
            for i in 0..n {
                let mean: f64 = z[i].iter().sum::<f64>() / f as f64;
                let mut v = 0.0;
                for &zz in &z[i] {
                    let d = zz - mean;
                    v += d * d;
                }
                v /= f as f64;
                var[i] = v;
                let inv = 1.0 / (v + EPS).sqrt();
                for j in 0..f {
                    xhat[i][j] = (z[i][j] - mean) * inv;
                    out[i][j] = gamma[j] * xhat[i][j] + beta[j];
                }
            }
            NormVals { out, xhat, var }
        }
    }
}

/// dL/dz of a normalization layer under batch statistics, given dL/d(out).
fn norm_backward_input(
    dout: &[Vec<f64>],
    xhat: &[Vec<f64>],
    var: &[f64],
    gamma: &[f64],
    kind: RefNorm,
) -> Vec<Vec<f64>> {
    let n = dout.len();
    let f = dout[0].len();
    let mut dxhat = vec![vec![0.0; f]; n];
    for i in 0..n {
        for j in 0..f {
            dxhat[i][j] = dout[i][j] * gamma[j];
        }
    }
    let mut dz = vec![vec![0.0; f]; n];
    match kind {
        RefNorm::Batch => {
            let mut sum_dxhat = vec![0.0; f];
            let mut sum_dxhat_xhat = vec![0.0; f];
            for i in 0..n {
                for j in 0..f {
                    sum_dxhat[j] += dxhat[i][j];
                    sum_dxhat_xhat[j] += dxhat[i][j] * xhat[i][j];
                }
            }
            for i in 0..n {
                for j in 0..f {
                    let inv = 1.0 / (var[j] + EPS).sqrt();
                    dz[i][j] = inv / n as f64
                        * (n as f64 * dxhat[i][j]
                            - sum_dxhat[j]
                            - xhat[i][j] * sum_dxhat_xhat[j]);
                }
            }
        }
        RefNorm::Layer => {
            for i in 0..n {
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..f {
                    sum_dxhat += dxhat[i][j];
                    sum_dxhat_xhat += dxhat[i][j] * xhat[i][j];
                }
                let inv = 1.0 / (var[i] + EPS).sqrt();
                for j in 0..f {
                    dz[i][j] = inv / f as f64
                        * (f as f64 * dxhat[i][j] - sum_dxhat - xhat[i][j] * sum_dxhat_xhat);
                }
            }
        }
    }
    dz
}

fn softmax_rows(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    z.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

fn entropy(p: &[Vec<f64>]) -> Vec<f64> {
    p.iter()
        .map(|row| {
            let mut e = 0.0;
            for &v in row {
                let pc = v.max(CLAMP);
                e -= pc * pc.ln();
            }
            e
        })
        .collect()
}

fn argmax_rows(p: &[Vec<f64>]) -> Vec<usize> {
    p.iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Softmax Jacobian-vector product per row: dz = p .* (g - sum(g .* p)).
fn softmax_vjp(p: &[Vec<f64>], g: &[Vec<f64>]) -> Vec<Vec<f64>> {
    p.iter()
        .zip(g)
        .map(|(prow, grow)| {
            let dot: f64 = prow.iter().zip(grow).map(|(&pp, &gg)| pp * gg).sum();
            prow.iter()
                .zip(grow)
                .map(|(&pp, &gg)| pp * (gg - dot))
                .collect()
        })
        .collect()
}

/// Forward values of one branch copy (what its backward needs).
struct BranchVals {
    n2: NormVals,
    probs: Vec<Vec<f64>>,
}

struct ForwardVals {
    n1: NormVals,
    source: BranchVals,
    adapt: BranchVals,
    fused: Vec<Vec<f64>>,
}

struct AdaptParams {
    gamma1: Vec<f64>,
    beta1: Vec<f64>,
    gamma2a: Vec<f64>,
    beta2a: Vec<f64>,
}

fn branch_forward(
    phi: &[Vec<f64>],
    w2: &[Vec<f64>],
    b2: &[f64],
    gamma2: &[f64],
    beta2: &[f64],
    w3: &[Vec<f64>],
    b3: &[f64],
    kind: RefNorm,
) -> BranchVals {
    let mut z2 = matmul(phi, w2);
    add_bias(&mut z2, b2);
    let n2 = norm_forward(&z2, gamma2, beta2, kind);
    let a2: Vec<Vec<f64>> = n2
        .out
        .iter()
        .map(|row| row.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
        .collect();
    let mut logits = matmul(&a2, w3);
    add_bias(&mut logits, b3);
    let probs = softmax_rows(&logits);
    BranchVals { n2, probs }
}

fn full_forward(fx: &Fixture, p: &AdaptParams) -> ForwardVals {
    let mut z1 = matmul(&fx.x, &fx.w1);
    add_bias(&mut z1, &fx.b1);
    let n1 = norm_forward(&z1, &p.gamma1, &p.beta1, fx.norm);
    let phi: Vec<Vec<f64>> = n1
        .out
        .iter()
        .map(|row| row.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
        .collect();
    let source = branch_forward(&phi, &fx.w2, &fx.b2, &fx.gamma2, &fx.beta2, &fx.w3, &fx.b3, fx.norm);
    let adapt = branch_forward(&phi, &fx.w2, &fx.b2, &p.gamma2a, &p.beta2a, &fx.w3, &fx.b3, fx.norm);
    let n = fx.rows;
    let mut fused = vec![vec![0.0; fx.c]; n];
    for i in 0..n {
        for j in 0..fx.c {
            fused[i][j] = fx.alpha * source.probs[i][j] + (1.0 - fx.alpha) * adapt.probs[i][j];
        }
    }
    ForwardVals {
        n1,
        source,
        adapt,
        fused,
    }
}

/// dL/dphi through one branch copy given dL/d(branch logits); optionally also
/// returns (dgamma2, dbeta2) of this copy's norm layer.
fn branch_backward(
    vals: &BranchVals,
    dlogits: &[Vec<f64>],
    w2: &[Vec<f64>],
    w3: &[Vec<f64>],
    gamma2: &[f64],
    kind: RefNorm,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let da2 = matmul(dlogits, &transpose(w3));
    // relu mask on the norm output
    let n = da2.len();
    let f = da2[0].len();
    let mut dn2 = vec![vec![0.0; f]; n];
    for i in 0..n {
        for j in 0..f {
            if vals.n2.out[i][j] > 0.0 {
                dn2[i][j] = da2[i][j];
            }
        }
    }
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            dgamma[j] += dn2[i][j] * vals.n2.xhat[i][j];
            dbeta[j] += dn2[i][j];
        }
    }
    let dz2 = norm_backward_input(&dn2, &vals.n2.xhat, &vals.n2.var, gamma2, kind);
    let dphi = matmul(&dz2, &transpose(w2));
    (dphi, dgamma, dbeta)
}

/// Applies the full reference procedure to the fixture's batch.
pub fn run_reference(fx: &Fixture) -> RefResult {
    let e0 = fx.entropy_factor * (fx.c as f64).ln();
    let mut p = AdaptParams {
        gamma1: fx.gamma1.clone(),
        beta1: fx.beta1.clone(),
        gamma2a: fx.gamma2.clone(),
        beta2a: fx.beta2.clone(),
    };
    let mut buf_g1 = vec![0.0; fx.h1];
    let mut buf_b1 = vec![0.0; fx.h1];
    let mut buf_g2 = vec![0.0; fx.h2];
    let mut buf_b2 = vec![0.0; fx.h2];

    let mut vals = full_forward(fx, &p);
    let mut forward_count = 1;
    let mut ent = entropy(&vals.fused);
    let select = |e: &[f64]| -> Vec<usize> {
        e.iter()
            .enumerate()
            .filter(|(_, &v)| v < e0)
            .map(|(i, _)| i)
            .collect()
    };
    let mut selected = select(&ent);
    let initial_selected = selected.clone();
    let mut selections = vec![selected.clone()];
    let mut entropies = vec![ent.clone()];

    let mut prev: Option<Vec<usize>> = None;
    let mut t = 0;
    while t < fx.max_iters && prev.as_ref() != Some(&selected) && !selected.is_empty() {
        prev = Some(selected.clone());
        let m = selected.len() as f64;
        let n = fx.rows;
        let in_sel = {
            let mut mask = vec![false; n];
            for &i in &selected {
                mask[i] = true;
            }
            mask
        };

        // ----- entropy objective: d(mean entropy over S)/d(fused) -----
        let mut dfused = vec![vec![0.0; fx.c]; n];
        for i in 0..n {
            if !in_sel[i] {
                continue;
            }
            for j in 0..fx.c {
                let pv = vals.fused[i][j];
                if pv > CLAMP {
                    dfused[i][j] = -(pv.ln() + 1.0) / m;
                }
            }
        }
        let dpg: Vec<Vec<f64>> = dfused
            .iter()
            .map(|r| r.iter().map(|&v| v * fx.alpha).collect())
            .collect();
        let dpa: Vec<Vec<f64>> = dfused
            .iter()
            .map(|r| r.iter().map(|&v| v * (1.0 - fx.alpha)).collect())
            .collect();
        let dlogits_s = softmax_vjp(&vals.source.probs, &dpg);
        let dlogits_a = softmax_vjp(&vals.adapt.probs, &dpa);
        let (dphi_s, _, _) =
            branch_backward(&vals.source, &dlogits_s, &fx.w2, &fx.w3, &fx.gamma2, fx.norm);
        let (dphi_a, _, _) =
            branch_backward(&vals.adapt, &dlogits_a, &fx.w2, &fx.w3, &p.gamma2a, fx.norm);
        // into the shallow segment: relu mask on n1 output, then gamma/beta
        let mut dg1 = vec![0.0; fx.h1];
        let mut db1 = vec![0.0; fx.h1];
        for i in 0..n {
            for j in 0..fx.h1 {
                if vals.n1.out[i][j] > 0.0 {
                    let da1 = dphi_s[i][j] + dphi_a[i][j];
                    dg1[j] += da1 * vals.n1.xhat[i][j];
                    db1[j] += da1;
                }
            }
        }

        // ----- cross-entropy objective on detached pseudo-labels -----
        let pseudo = argmax_rows(&vals.fused);
        let mut dfused_ce = vec![vec![0.0; fx.c]; n];
        for i in 0..n {
            if !in_sel[i] {
                continue;
            }
            let pv = vals.fused[i][pseudo[i]];
            if pv > CLAMP {
                dfused_ce[i][pseudo[i]] = -1.0 / pv / m;
            }
        }
        let dpa_ce: Vec<Vec<f64>> = dfused_ce
            .iter()
            .map(|r| r.iter().map(|&v| v * (1.0 - fx.alpha)).collect())
            .collect();
        let dlogits_ce = softmax_vjp(&vals.adapt.probs, &dpa_ce);
        let (_, dg2, db2) =
            branch_backward(&vals.adapt, &dlogits_ce, &fx.w2, &fx.w3, &p.gamma2a, fx.norm);

        // ----- momentum SGD: shallow then adapt branch -----
        for j in 0..fx.h1 {
            buf_g1[j] = fx.momentum * buf_g1[j] + dg1[j];
            p.gamma1[j] -= fx.lr_shallow * buf_g1[j];
            buf_b1[j] = fx.momentum * buf_b1[j] + db1[j];
            p.beta1[j] -= fx.lr_shallow * buf_b1[j];
        }
        for j in 0..fx.h2 {
            buf_g2[j] = fx.momentum * buf_g2[j] + dg2[j];
            p.gamma2a[j] -= fx.lr_adapt * buf_g2[j];
            buf_b2[j] = fx.momentum * buf_b2[j] + db2[j];
            p.beta2a[j] -= fx.lr_adapt * buf_b2[j];
        }

        // ----- re-predict and re-select -----
        vals = full_forward(fx, &p);
        forward_count += 1;
        ent = entropy(&vals.fused);
        selected = select(&ent);
        selections.push(selected.clone());
        entropies.push(ent.clone());
        t += 1;
    }

    let prs: Vec<usize> = selected
        .iter()
        .copied()
        .filter(|i| initial_selected.binary_search(i).is_err())
        .collect();

    RefResult {
        selections,
        entropies,
        prs,
        final_fused: vals.fused,
        gamma1: p.gamma1,
        beta1: p.beta1,
        gamma2_adapt: p.gamma2a,
        beta2_adapt: p.beta2a,
        forward_count,
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// The five pinned fixtures: batch-norm configurations of varying sizes,
/// step sizes, and fusion weights, plus one layer-norm configuration. Two of
/// them (`bn_reselect`, `ln_reselect`) run the full two rounds and discover
/// potentially reliable samples.
pub fn fixtures() -> Vec<Fixture> {
    struct Spec {
        name: &'static str,
        seed: u64,
        dims: (usize, usize, usize, usize), // d_in, h1, h2, c
        rows: usize,
        norm: RefNorm,
        alpha: f64,
        entropy_factor: f64,
        lr: f64,
    }
    let specs = [
        Spec { name: "bn_small", seed: 101, dims: (2, 4, 4, 3), rows: 6, norm: RefNorm::Batch, alpha: 0.5, entropy_factor: 1.00, lr: 0.1 },
        Spec { name: "bn_wide", seed: 303, dims: (4, 6, 6, 5), rows: 16, norm: RefNorm::Batch, alpha: 0.5, entropy_factor: 0.90, lr: 0.3 },
        Spec { name: "bn_reselect", seed: 5, dims: (3, 5, 4, 4), rows: 10, norm: RefNorm::Batch, alpha: 0.5, entropy_factor: 0.90, lr: 0.6 },
        Spec { name: "bn_skewed_alpha", seed: 404, dims: (3, 4, 5, 4), rows: 8, norm: RefNorm::Batch, alpha: 0.3, entropy_factor: 1.00, lr: 0.1 },
        Spec { name: "ln_reselect", seed: 2, dims: (3, 5, 4, 4), rows: 10, norm: RefNorm::Layer, alpha: 0.5, entropy_factor: 0.90, lr: 0.6 },
    ];
    specs
        .into_iter()
        .map(|s| {
            let (d_in, h1, h2, c) = s.dims;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            Fixture {
                name: s.name,
                d_in,
                h1,
                h2,
                c,
                rows: s.rows,
                norm: s.norm,
                alpha: s.alpha,
                entropy_factor: s.entropy_factor,
                lr_shallow: s.lr,
                lr_adapt: s.lr,
                momentum: 0.9,
                max_iters: 2,
                w1: rand_mat(&mut rng, d_in, h1, 0.9),
                b1: rand_vec(&mut rng, h1, -0.2, 0.2),
                gamma1: rand_vec(&mut rng, h1, 0.8, 1.2),
                beta1: rand_vec(&mut rng, h1, -0.2, 0.2),
                w2: rand_mat(&mut rng, h1, h2, 0.9),
                b2: rand_vec(&mut rng, h2, -0.2, 0.2),
                gamma2: rand_vec(&mut rng, h2, 0.8, 1.2),
                beta2: rand_vec(&mut rng, h2, -0.2, 0.2),
                w3: rand_mat(&mut rng, h2, c, 0.9),
                b3: rand_vec(&mut rng, c, -0.2, 0.2),
                x: rand_mat(&mut rng, s.rows, d_in, 2.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_pinned() {
        let a = fixtures();
        let b = fixtures();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.w1, fb.w1);
            assert_eq!(fa.x, fb.x);
        }
    }

    #[test]
    fn reference_runs_and_terminates() {
        for fx in fixtures() {
            let res = run_reference(&fx);
            assert!(res.forward_count <= fx.max_iters + 1);
            assert_eq!(res.selections.len(), res.entropies.len());
            for row in &res.final_fused {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }
}
