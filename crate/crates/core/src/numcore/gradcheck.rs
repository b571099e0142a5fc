//! Central finite-difference gradient verification.
//!
//! All checks run in 64-bit regardless of training precision; single
//! precision is too coarse for reliable finite differences. Each check
//! pairs a scalar objective with its analytic gradient and compares against
//! central differences coordinate by coordinate.

use rand::Rng;

use super::rng::stream;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-6;

/// A differentiable scalar objective under test.
pub struct GradCheck {
    pub name: String,
    pub x0: Vec<f64>,
    pub tol: f64,
    objective: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    analytic: Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {:<28} max_rel_err={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol
        )
    }
}

impl GradCheck {
    pub fn new(
        name: &str,
        x0: Vec<f64>,
        objective: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        analytic: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        GradCheck { name: name.to_string(), x0, tol: DEFAULT_TOL, objective: Box::new(objective), analytic: Box::new(analytic) }
    }

    pub fn run(&self) -> CheckResult {
        let fd = central_diff(&*self.objective, &self.x0, DEFAULT_STEP);
        let an = (self.analytic)(&self.x0);
        assert_eq!(fd.len(), an.len(), "analytic gradient length mismatch in `{}`", self.name);
        let max_rel_err = max_relative_error(&an, &fd);
        CheckResult { name: self.name.clone(), max_rel_err, tol: self.tol, passed: max_rel_err < self.tol }
    }
}

/// Central differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
pub fn central_diff(f: &(dyn Fn(&[f64]) -> f64), x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Element-wise relative error with a guard against near-zero denominators:
/// when both magnitudes are below 1e-6 the pair must agree to 1e-9 absolute.
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &d) in analytic.iter().zip(fd) {
        let denom = a.abs().max(d.abs());
        let err = if denom < 1e-6 {
            if (a - d).abs() < 1e-9 {
                0.0
            } else {
                (a - d).abs() / 1e-6
            }
        } else {
            (a - d).abs() / denom
        };
        worst = worst.max(err);
    }
    worst
}

/// Builds a check for an objective expressed as a tape program over a single
/// flattened parameter vector.
pub fn tape_check(
    name: &str,
    x0: Vec<f64>,
    build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId + Send + Sync + Clone + 'static,
) -> GradCheck {
    let n = x0.len();
    let build2 = build.clone();
    GradCheck::new(
        name,
        x0,
        move |x: &[f64]| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(Tensor::new(&[x.len()], x.to_vec()));
            let out = build(&mut tape, leaf);
            tape.value(out).item()
        },
        move |x: &[f64]| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(Tensor::new(&[x.len()], x.to_vec()));
            let out = build2(&mut tape, leaf);
            let grads = tape.backward(out).expect("backward failed in gradient check");
            grads.wrt(leaf).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n])
        },
    )
}

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// One finite-difference check per sanctioned tape primitive.
///
/// Each objective contracts the primitive's output against a fixed random
/// probe vector so the finite differences isolate that primitive's backward
/// rule. Inputs for kinked primitives (relu, clamp) are sampled away from
/// their kinks.
pub fn primitive_suite(seed: u64) -> Vec<GradCheck> {
    let mut checks = Vec::new();
    let mut rng = stream(seed, "gradcheck", 0);

    // Probe-weighted contraction helper: sum(op(x) * probe).
    macro_rules! probed {
        ($name:expr, $x0:expr, $shape:expr, $probe_len:expr, $apply:expr) => {{
            let probe = Tensor::new(&[$probe_len], rand_vec(&mut rng, $probe_len, -1.0, 1.0));
            let shape: Vec<usize> = $shape.to_vec();
            let apply = $apply;
            checks.push(tape_check($name, $x0, move |t: &mut Tape<f64>, leaf| {
                let shaped = t.reshape(leaf, &shape);
                let y = apply(t, shaped);
                let flat_len = t.value(y).len();
                let yf = t.reshape(y, &[flat_len]);
                let p = t.constant(probe.clone());
                let w = t.mul(yf, p);
                t.sum_all(w)
            }));
        }};
    }

    let x6 = rand_vec(&mut rng, 6, -2.0, 2.0);
    probed!("neg", x6.clone(), [6], 6, |t: &mut Tape<f64>, x| t.neg(x));
    probed!("square", x6.clone(), [6], 6, |t: &mut Tape<f64>, x| t.square(x));
    probed!("tanh", x6.clone(), [6], 6, |t: &mut Tape<f64>, x| t.tanh(x));
    probed!("sigmoid", x6.clone(), [6], 6, |t: &mut Tape<f64>, x| t.sigmoid(x));
    probed!("silu", x6.clone(), [6], 6, |t: &mut Tape<f64>, x| t.silu(x));
    probed!("exp", rand_vec(&mut rng, 6, -1.0, 1.0), [6], 6, |t: &mut Tape<f64>, x| t.exp(x));
    probed!("ln", rand_vec(&mut rng, 6, 0.5, 3.0), [6], 6, |t: &mut Tape<f64>, x| t.ln(x));
    probed!("sqrt", rand_vec(&mut rng, 6, 0.5, 3.0), [6], 6, |t: &mut Tape<f64>, x| t.sqrt(x));
    probed!("add_scalar", x6.clone(), [6], 6, |t: &mut Tape<f64>, x| t.add_scalar(x, 0.7));
    probed!("mul_scalar", x6.clone(), [6], 6, |t: &mut Tape<f64>, x| t.mul_scalar(x, -1.3));

    // relu / clamp: keep inputs away from the kinks.
    let away: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 0.5 + 0.1 * i as f64 } else { -0.5 - 0.1 * i as f64 }).collect();
    probed!("relu", away.clone(), [6], 6, |t: &mut Tape<f64>, x| t.relu(x));
    probed!("clamp", away, [6], 6, |t: &mut Tape<f64>, x| t.clamp(x, -0.9, 0.9));

    // Binary ops with broadcasting: params pack both operands.
    {
        let x0 = rand_vec(&mut rng, 6 + 3, -2.0, 2.0);
        checks.push(tape_check("add_broadcast", x0, |t, leaf| {
            let a0 = t.slice_axis(leaf, 0, 0, 6);
            let a = t.reshape(a0, &[2, 3]);
            let b = t.slice_axis(leaf, 0, 6, 3);
            let y = t.add(a, b);
            let sq = t.square(y);
            t.sum_all(sq)
        }));
        let x1 = rand_vec(&mut rng, 6 + 3, -2.0, 2.0);
        checks.push(tape_check("sub", x1, |t, leaf| {
            let a0 = t.slice_axis(leaf, 0, 0, 6);
            let a = t.reshape(a0, &[2, 3]);
            let b = t.slice_axis(leaf, 0, 6, 3);
            let y = t.sub(a, b);
            let sq = t.square(y);
            t.sum_all(sq)
        }));
        let x2 = rand_vec(&mut rng, 6 + 3, -2.0, 2.0);
        checks.push(tape_check("mul_broadcast", x2, |t, leaf| {
            let a0 = t.slice_axis(leaf, 0, 0, 6);
            let a = t.reshape(a0, &[2, 3]);
            let b = t.slice_axis(leaf, 0, 6, 3);
            let y = t.mul(a, b);
            let sq = t.square(y);
            t.sum_all(sq)
        }));
        let mut x3 = rand_vec(&mut rng, 6 + 3, 0.5, 2.0);
        for v in x3.iter_mut().take(6) {
            *v -= 2.5; // numerators can be negative; denominators stay >= 0.5
        }
        checks.push(tape_check("div", x3, |t, leaf| {
            let a0 = t.slice_axis(leaf, 0, 0, 6);
            let a = t.reshape(a0, &[2, 3]);
            let b = t.slice_axis(leaf, 0, 6, 3);
            let y = t.div(a, b);
            let sq = t.square(y);
            t.sum_all(sq)
        }));
    }

    // matmul: [2,3] @ [3,2]
    {
        let x0 = rand_vec(&mut rng, 12, -1.0, 1.0);
        let probe = Tensor::new(&[4], rand_vec(&mut rng, 4, -1.0, 1.0));
        checks.push(tape_check("matmul", x0, move |t, leaf| {
            let a0 = t.slice_axis(leaf, 0, 0, 6);
            let a = t.reshape(a0, &[2, 3]);
            let b0 = t.slice_axis(leaf, 0, 6, 6);
            let b = t.reshape(b0, &[3, 2]);
            let y = t.matmul(a, b);
            let yf = t.reshape(y, &[4]);
            let p = t.constant(probe.clone());
            let w = t.mul(yf, p);
            t.sum_all(w)
        }));
    }

    // batch_matmul: [2,2,3] @ [2,3,2]
    {
        let x0 = rand_vec(&mut rng, 24, -1.0, 1.0);
        let probe = Tensor::new(&[8], rand_vec(&mut rng, 8, -1.0, 1.0));
        checks.push(tape_check("batch_matmul", x0, move |t, leaf| {
            let a0 = t.slice_axis(leaf, 0, 0, 12);
            let a = t.reshape(a0, &[2, 2, 3]);
            let b0 = t.slice_axis(leaf, 0, 12, 12);
            let b = t.reshape(b0, &[2, 3, 2]);
            let y = t.batch_matmul(a, b);
            let yf = t.reshape(y, &[8]);
            let p = t.constant(probe.clone());
            let w = t.mul(yf, p);
            t.sum_all(w)
        }));
    }

    probed!("permute", rand_vec(&mut rng, 24, -1.0, 1.0), [2, 3, 4], 24, |t: &mut Tape<f64>, x| t.permute(x, &[2, 0, 1]));
    probed!("reshape", rand_vec(&mut rng, 12, -1.0, 1.0), [3, 4], 12, |t: &mut Tape<f64>, x| t.reshape(x, &[2, 6]));
    probed!("sum_last", rand_vec(&mut rng, 12, -1.0, 1.0), [3, 4], 3, |t: &mut Tape<f64>, x| t.sum_last(x));
    probed!("slice_axis", rand_vec(&mut rng, 12, -1.0, 1.0), [3, 4], 8, |t: &mut Tape<f64>, x| t.slice_axis(x, 0, 1, 2));
    probed!("concat", rand_vec(&mut rng, 12, -1.0, 1.0), [3, 4], 24, |t: &mut Tape<f64>, x| t.concat(&[x, x], 1));

    {
        let x0 = rand_vec(&mut rng, 6, -1.0, 1.0);
        checks.push(tape_check("sum_all", x0, |t, leaf| {
            let s = t.square(leaf);
            t.sum_all(s)
        }));
        let x1 = rand_vec(&mut rng, 6, -1.0, 1.0);
        checks.push(tape_check("mean_all", x1, |t, leaf| {
            let s = t.square(leaf);
            t.mean_all(s)
        }));
    }

    // masked softmax over a banded mask
    {
        let mask = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let probe = Tensor::new(&[9], rand_vec(&mut rng, 9, -1.0, 1.0));
        let x0 = rand_vec(&mut rng, 9, -1.5, 1.5);
        checks.push(tape_check("masked_softmax", x0, move |t, leaf| {
            let x = t.reshape(leaf, &[3, 3]);
            let y = t.masked_softmax(x, &mask);
            let yf = t.reshape(y, &[9]);
            let p = t.constant(probe.clone());
            let w = t.mul(yf, p);
            t.sum_all(w)
        }));
    }

    // rms_norm: params pack activations [2,4] and gain [4]
    {
        let x0 = rand_vec(&mut rng, 12, -1.5, 1.5);
        let probe = Tensor::new(&[8], rand_vec(&mut rng, 8, -1.0, 1.0));
        checks.push(tape_check("rms_norm", x0, move |t, leaf| {
            let a0 = t.slice_axis(leaf, 0, 0, 8);
            let a = t.reshape(a0, &[2, 4]);
            let gain = t.slice_axis(leaf, 0, 8, 4);
            let y = t.rms_norm(a, gain, 1e-6);
            let yf = t.reshape(y, &[8]);
            let p = t.constant(probe.clone());
            let w = t.mul(yf, p);
            t.sum_all(w)
        }));
    }

    probed!(
        "extract_patches",
        rand_vec(&mut rng, 2 * 2 * 4 * 4, -1.0, 1.0),
        [2, 2, 4, 4],
        2 * 2 * 2 * (2 * 3 * 3),
        |t: &mut Tape<f64>, x| t.extract_patches(x, 3, 3, 2, 1)
    );
    probed!(
        "upsample_nearest_2x",
        rand_vec(&mut rng, 2 * 1 * 3 * 3, -1.0, 1.0),
        [2, 1, 3, 3],
        2 * 1 * 6 * 6,
        |t: &mut Tape<f64>, x| t.upsample_nearest_2x(x)
    );

    checks
}

/// Runs a list of checks and returns the results; convenience for the CLI
/// and the acceptance suite.
pub fn run_all(checks: &[GradCheck]) -> Vec<CheckResult> {
    checks.iter().map(GradCheck::run).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_finite_differences() {
        for r in run_all(&primitive_suite(20240117)) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn composed_three_layer_map_matches_finite_differences() {
        // Random 3-layer composed map with 12 scalar parameters:
        // y = tanh(W2 @ silu(W1 @ x + b1) + b2), objective = sum(y^2).
        // Parameter layout: W1 [2x2]=4, b1 [2]=2, W2 [2x2]=4, b2 [2]=2.
        let mut rng = stream(99, "threelayer", 0);
        let x0 = rand_vec(&mut rng, 12, -0.8, 0.8);
        let input = Tensor::new(&[2, 1], vec![0.3, -0.7]);
        let check = tape_check("three_layer", x0, move |t, leaf| {
            let w1s = t.slice_axis(leaf, 0, 0, 4);
            let w1 = t.reshape(w1s, &[2, 2]);
            let b1s = t.slice_axis(leaf, 0, 4, 2);
            let b1 = t.reshape(b1s, &[2, 1]);
            let w2s = t.slice_axis(leaf, 0, 6, 4);
            let w2 = t.reshape(w2s, &[2, 2]);
            let b2s = t.slice_axis(leaf, 0, 10, 2);
            let b2 = t.reshape(b2s, &[2, 1]);
            let x = t.constant(input.clone());
            let h0 = t.matmul(w1, x);
            let h1 = t.add(h0, b1);
            let h2 = t.silu(h1);
            let h3 = t.matmul(w2, h2);
            let h4 = t.add(h3, b2);
            let y = t.tanh(h4);
            let sq = t.square(y);
            t.sum_all(sq)
        });
        let r = check.run();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let check = GradCheck::new("deliberately_wrong", vec![1.0, 2.0], |x| x.iter().map(|v| v * v).sum(), |x| {
            vec![2.0 * x[0] + 0.5, 2.0 * x[1]]
        });
        let r = check.run();
        assert!(!r.passed);
        assert!(r.max_rel_err > 0.1);
    }
}
