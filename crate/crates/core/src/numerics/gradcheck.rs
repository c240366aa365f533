//! Central-difference verification of the tape's analytic gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::tape::{Tape, VarId};
use super::tensor::Tensor;

/// Outcome of checking one op (or composite) against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<26} {:>5} elems  max_abs {:.3e}  max_rel {:.3e}  {}",
            self.name,
            self.checked,
            self.max_abs_err,
            self.max_rel_err,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` records a forward pass producing a single-element loss from
/// leaves created (in order) from `inputs`. Every element of every input
/// is perturbed; relative error is measured against
/// `max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check(
    name: &str,
    inputs: &[Tensor<f64>],
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
) -> GradCheckReport {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        assert!(
            tape.nonfinite_op().is_none(),
            "{name}: non-finite during finite differencing ({:?})",
            tape.nonfinite_op()
        );
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss);

    let h = 1e-5;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].shape().to_vec()));
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[ei] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1.0);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradCheckReport {
        name: name.to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        checked,
        tol,
        pass: max_rel <= tol,
    }
}

/// True when two recordings of the same forward pass agree bit for bit.
pub fn forward_is_deterministic(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
) -> bool {
    let run = || {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item().to_bits()
    };
    run() == run()
}

fn rt(rng: &mut ChaCha20Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect();
    Tensor::new(shape, data)
}

/// Random probe so the scalarized loss weights every output element
/// differently (a plain sum can hide transposition bugs).
fn probed(tape: &mut Tape<f64>, out: VarId, probe: &Tensor<f64>) -> VarId {
    assert_eq!(tape.value(out).shape(), probe.shape(), "probe shape");
    let p = tape.constant(probe.clone());
    let weighted = tape.mul(out, p);
    tape.sum_all(weighted)
}

/// Check every differentiable op against central differences.
pub fn run_full_suite(tol: f64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5f3759df);
    let mut reports = Vec::new();

    {
        let a = rt(&mut rng, vec![3, 4]);
        let b = rt(&mut rng, vec![3, 4]);
        let probe = rt(&mut rng, vec![3, 4]);
        reports.push(finite_diff_check("add_sub_mul_scale", &[a, b], tol, move |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let d = t.sub(s, ids[1]);
            let m = t.mul(d, ids[1]);
            let sc = t.scale(m, 1.7);
            probed(t, sc, &probe)
        }));
    }

    for (name, f) in [
        ("gelu", 0usize),
        ("exp", 1),
        ("sin", 2),
        ("cos", 3),
    ] {
        let x = rt(&mut rng, vec![2, 5]);
        let probe = rt(&mut rng, vec![2, 5]);
        reports.push(finite_diff_check(name, &[x], tol, move |t, ids| {
            let y = match f {
                0 => t.gelu(ids[0]),
                1 => t.exp(ids[0]),
                2 => t.sin(ids[0]),
                _ => t.cos(ids[0]),
            };
            probed(t, y, &probe)
        }));
    }

    {
        let a = rt(&mut rng, vec![3, 4]);
        let b = rt(&mut rng, vec![4, 2]);
        let probe = rt(&mut rng, vec![3, 2]);
        reports.push(finite_diff_check("matmul", &[a, b], tol, move |t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            probed(t, y, &probe)
        }));
    }
    {
        let a = rt(&mut rng, vec![3, 4]);
        let b = rt(&mut rng, vec![2, 4]);
        let probe = rt(&mut rng, vec![3, 2]);
        reports.push(finite_diff_check("matmul_nt", &[a, b], tol, move |t, ids| {
            let y = t.matmul_nt(ids[0], ids[1]);
            probed(t, y, &probe)
        }));
    }
    {
        let m = rt(&mut rng, vec![3, 4]);
        let bias = rt(&mut rng, vec![4]);
        let col = rt(&mut rng, vec![3]);
        let probe = rt(&mut rng, vec![3, 4]);
        reports.push(finite_diff_check("row_col_broadcasts", &[m, bias, col], tol, move |t, ids| {
            let a = t.add_row_bias(ids[0], ids[1]);
            let b = t.add_col(a, ids[2]);
            let c = t.mul_col(b, ids[2]);
            probed(t, c, &probe)
        }));
    }
    {
        let m = rt(&mut rng, vec![4, 6]);
        let probe = rt(&mut rng, vec![4, 6]);
        reports.push(finite_diff_check("slice_concat_cols", &[m], tol, move |t, ids| {
            let left = t.slice_cols(ids[0], 0, 2);
            let mid = t.slice_cols(ids[0], 2, 5);
            let right = t.slice_cols(ids[0], 5, 6);
            let y = t.concat_cols(&[left, mid, right]);
            probed(t, y, &probe)
        }));
    }
    {
        let m = rt(&mut rng, vec![5, 3]);
        let probe = rt(&mut rng, vec![5, 3]);
        reports.push(finite_diff_check("slice_concat_rows", &[m], tol, move |t, ids| {
            let top = t.slice_rows(ids[0], 0, 2);
            let bottom = t.slice_rows(ids[0], 2, 5);
            let y = t.concat_rows(&[top, bottom]);
            probed(t, y, &probe)
        }));
    }
    {
        let m = rt(&mut rng, vec![2, 6]);
        let probe = rt(&mut rng, vec![3, 4]);
        reports.push(finite_diff_check("reshape", &[m], tol, move |t, ids| {
            let y = t.reshape(ids[0], vec![3, 4]);
            probed(t, y, &probe)
        }));
    }
    {
        let x = rt(&mut rng, vec![3, 5]);
        let probe = rt(&mut rng, vec![3, 5]);
        reports.push(finite_diff_check("softmax", &[x], tol, move |t, ids| {
            let y = t.softmax_lastdim(ids[0]);
            probed(t, y, &probe)
        }));
    }
    {
        let x = rt(&mut rng, vec![3, 6]);
        let gamma = rt(&mut rng, vec![6]);
        let beta = rt(&mut rng, vec![6]);
        let probe = rt(&mut rng, vec![3, 6]);
        reports.push(finite_diff_check("layer_norm", &[x, gamma, beta], tol, move |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-6);
            probed(t, y, &probe)
        }));
    }
    {
        let map = rt(&mut rng, vec![5, 4, 3]);
        // interior coordinates away from texel centers so the +-h stencil
        // stays inside one bilinear cell
        let px = Tensor::new(vec![4], vec![0.23, 0.41, 0.66, 0.84]);
        let py = Tensor::new(vec![4], vec![0.33, 0.57, 0.21, 0.77]);
        let probe = rt(&mut rng, vec![4, 3]);
        reports.push(finite_diff_check("bilinear_sample", &[map, px, py], tol, move |t, ids| {
            let y = t.bilinear_sample(ids[0], ids[1], ids[2]);
            probed(t, y, &probe)
        }));
    }
    {
        let input = rt(&mut rng, vec![5, 4, 2]);
        let kernel = rt(&mut rng, vec![3, 3, 2, 3]);
        let bias = rt(&mut rng, vec![3]);
        let probe = rt(&mut rng, vec![3, 2, 3]);
        reports.push(finite_diff_check("conv2d_s2", &[input, kernel, bias], tol, move |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1);
            probed(t, y, &probe)
        }));
    }
    {
        let mut rois = rt(&mut rng, vec![3, 4]);
        for r in rois.data_mut().chunks_mut(4) {
            r[2] = r[2].abs().max(0.3);
            r[3] = r[3].abs().max(0.3);
        }
        let deltas = rt(&mut rng, vec![3, 4]);
        let probe = rt(&mut rng, vec![3, 4]);
        reports.push(finite_diff_check("roi_adjust", &[rois, deltas], tol, move |t, ids| {
            let y = t.roi_adjust(ids[0], ids[1]);
            probed(t, y, &probe)
        }));
    }
    {
        let rois = Tensor::new(vec![2, 4], vec![0.31, 0.47, 0.39, 0.23, 0.63, 0.29, 0.17, 0.53]);
        let probe = rt(&mut rng, vec![2, 16]);
        reports.push(finite_diff_check("roi_position_encoding", &[rois], 1e-4, move |t, ids| {
            let y = t.roi_position_encoding(ids[0], 16);
            probed(t, y, &probe)
        }));
    }
    {
        let rois = Tensor::new(vec![2, 4], vec![0.4, 0.6, 0.5, 0.3, 0.7, 0.2, 0.25, 0.45]);
        let grid = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.5, 0.5, 0.85, 0.15]);
        let probe = rt(&mut rng, vec![3, 2]);
        reports.push(finite_diff_check("geometric_bias", &[rois], tol, move |t, ids| {
            let y = t.geometric_bias(ids[0], &grid, 0.5);
            probed(t, y, &probe)
        }));
    }
    {
        let a = rt(&mut rng, vec![7]);
        let target = rt(&mut rng, vec![7]);
        reports.push(finite_diff_check("cosine_loss", &[a], tol, move |t, ids| {
            t.cosine_loss(ids[0], &target)
        }));
    }
    {
        let logits = rt(&mut rng, vec![4, 5]);
        reports.push(finite_diff_check("cross_entropy_rows", &[logits], tol, move |t, ids| {
            t.cross_entropy_rows(ids[0], &[1, 255, 4, 0], 255)
        }));
    }
    {
        let logits = rt(&mut rng, vec![3, 4]);
        let raw = rt(&mut rng, vec![3, 4]);
        let targets = Tensor::new(
            vec![3, 4],
            super::kernels::softmax_rows(raw.data(), 4),
        );
        reports.push(finite_diff_check("cross_entropy_soft", &[logits], tol, move |t, ids| {
            t.cross_entropy_soft(ids[0], &targets)
        }));
    }

    reports
}
