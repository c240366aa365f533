//! The focusing transformer: latent tokens with RoIs sample the stem
//! feature map sparsely, refine their RoIs, and are lifted to the cortex
//! width by a final sampling-only block.

use crate::model::SfSpec;
use crate::nn;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;
use crate::params::Bound;
use crate::Scalar;

/// Per-stage record of RoIs (and final sampling points) captured during a
/// forward pass, for visualization and tests.
#[derive(Clone, Debug, Default)]
pub struct FocusTrace<S: Scalar> {
    /// Initial RoIs plus the state after each adjustment: `iters + 1`
    /// entries of shape [N, 4].
    pub stage_rois: Vec<Tensor<S>>,
    /// Flattened sampling coordinates of the final full-width block
    /// ([N·P] x then [N·P] y, normalized).
    pub final_points: Option<(Tensor<S>, Tensor<S>)>,
}

/// Two stride-2 3×3 convolutions with GELU between: [H,W,3] → [H/4,W/4,C].
pub fn early_conv<S: Scalar>(tape: &mut Tape<S>, p: &Bound, image: VarId) -> VarId {
    let c1 = tape.conv2d(image, p.p("sf.stem.conv1.w"), p.p("sf.stem.conv1.b"), 2, 1);
    let c1 = tape.gelu(c1);
    tape.conv2d(c1, p.p("sf.stem.conv2.w"), p.p("sf.stem.conv2.b"), 2, 1)
}

/// Sampling coordinates for every token: offsets predicted from the token
/// embedding (plus the grid-initialized bias) are scaled by the RoI size
/// and shifted to its center. Returns flattened ([N·P] each) x and y.
pub fn sampling_points<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    offset_prefix: &str,
    tokens: VarId,
    rois: VarId,
) -> (VarId, VarId) {
    let n = tape.value(tokens).rows();
    let two_p = tape.value(p.p(&format!("{offset_prefix}.b"))).len();
    let pc = two_p / 2;
    let off = nn::linear(tape, p, offset_prefix, tokens);
    let off_x = tape.slice_cols(off, 0, pc);
    let off_y = tape.slice_cols(off, pc, 2 * pc);
    let x_col = tape.slice_cols(rois, 0, 1);
    let y_col = tape.slice_cols(rois, 1, 2);
    let w_col = tape.slice_cols(rois, 2, 3);
    let h_col = tape.slice_cols(rois, 3, 4);
    let px = tape.mul_col(off_x, w_col);
    let px = tape.add_col(px, x_col);
    let py = tape.mul_col(off_y, h_col);
    let py = tape.add_col(py, y_col);
    (tape.reshape(px, vec![n * pc]), tape.reshape(py, vec![n * pc]))
}

/// Bilinear-sample the feature map at each token's points and flatten:
/// [N, P·C].
fn gather<S: Scalar>(
    tape: &mut Tape<S>,
    fmap: VarId,
    px: VarId,
    py: VarId,
    n: usize,
) -> VarId {
    let c = tape.value(fmap).dim(2);
    let total = tape.value(px).len();
    let sampled = tape.bilinear_sample(fmap, px, py);
    tape.reshape(sampled, vec![n, (total / n) * c])
}

/// RoI deltas from the token embeddings: two-layer GELU MLP to [N, 4].
fn roi_deltas<S: Scalar>(tape: &mut Tape<S>, p: &Bound, tokens: VarId) -> VarId {
    let h = nn::linear(tape, p, "sf.focus.iter.delta.fc1", tokens);
    let h = tape.gelu(h);
    nn::linear(tape, p, "sf.focus.iter.delta.fc2", h)
}

/// Full focusing stage on an already-bound tape.
///
/// `tokens` / `rois` are the initial state (normally the learnable
/// `sf.focus.tokens` / `sf.focus.rois`, passed explicitly so callers can
/// substitute leaves for gradient checks or re-initialized grids).
///
/// Per iteration, in order: feature sampling (residual), RoI position
/// encoding injection, one shared encoder block, RoI adjustment. After
/// `focus_iters` rounds the final block samples again and projects the
/// flattened features to the cortex width. Returns the lifted tokens
/// [N, d_cortex] and the final RoIs [N, 4].
pub fn focusing_forward<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    spec: &SfSpec,
    image: VarId,
    tokens: VarId,
    rois: VarId,
    mut trace: Option<&mut FocusTrace<S>>,
) -> (VarId, VarId) {
    let n = tape.value(tokens).rows();
    let fmap = early_conv(tape, p, image);
    let mut tokens = tokens;
    let mut rois = rois;
    if let Some(t) = trace.as_deref_mut() {
        t.stage_rois.push(tape.value(rois).clone());
    }
    for _ in 0..spec.focus_iters {
        let (px, py) = sampling_points(tape, p, "sf.focus.iter.offset", tokens, rois);
        let flat = gather(tape, fmap, px, py, n);
        let feat = nn::linear(tape, p, "sf.focus.iter.featproj", flat);
        tokens = tape.add(tokens, feat);
        let pe = tape.roi_position_encoding(rois, spec.focus_dim);
        tokens = tape.add(tokens, pe);
        tokens = nn::encoder_block(tape, p, "sf.focus.iter", tokens, spec.focus_heads);
        let deltas = roi_deltas(tape, p, tokens);
        rois = tape.roi_adjust(rois, deltas);
        if let Some(t) = trace.as_deref_mut() {
            t.stage_rois.push(tape.value(rois).clone());
        }
    }
    let (px, py) = sampling_points(tape, p, "sf.focus.last.offset", tokens, rois);
    if let Some(t) = trace.as_deref_mut() {
        t.final_points = Some((tape.value(px).clone(), tape.value(py).clone()));
    }
    let flat = gather(tape, fmap, px, py, n);
    let lifted = nn::linear(tape, p, "sf.focus.last.featproj", flat);
    (lifted, rois)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{materialize, sf_manifest, SfSpec};
    use crate::params::ParamStore;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_store(spec: &SfSpec, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        materialize(&sf_manifest(spec), &mut rng)
    }

    fn image(side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = side * side * 3;
        Tensor::new(vec![side, side, 3], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn early_conv_shapes() {
        let spec = SfSpec::toy(4);
        let store = toy_store(&spec, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(image(32, 2));
        let fmap = early_conv(&mut tape, &p, img);
        assert_eq!(tape.value(fmap).shape(), &[8, 8, spec.stem_out]);
    }

    #[test]
    fn zero_bias_stem_maps_zero_to_zero() {
        let spec = SfSpec::toy(4);
        let store = toy_store(&spec, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(Tensor::zeros(vec![32, 32, 3]));
        let fmap = early_conv(&mut tape, &p, img);
        assert!(tape.value(fmap).data().iter().all(|&v| v == 0.0), "linear stem with zero bias");
    }

    #[test]
    fn grid_bias_recovers_grid_points_for_full_roi() {
        // zero-init offset linear + full-image RoI -> exact 2x2 grid
        let spec = SfSpec::toy(1);
        let store = toy_store(&spec, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let tokens = tape.constant(Tensor::zeros(vec![1, spec.focus_dim]));
        let rois = tape.constant(Tensor::new(vec![1, 4], vec![0.5, 0.5, 1.0, 1.0]));
        let (px, py) = sampling_points(&mut tape, &p, "sf.focus.iter.offset", tokens, rois);
        assert_eq!(tape.value(px).data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(tape.value(py).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn half_roi_halves_offset_spans() {
        let spec = SfSpec::toy(1);
        let store = toy_store(&spec, 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let tokens = tape.constant(Tensor::zeros(vec![1, spec.focus_dim]));
        let rois = tape.constant(Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]));
        let (px, _) = sampling_points(&mut tape, &p, "sf.focus.iter.offset", tokens, rois);
        assert_eq!(tape.value(px).data(), &[0.25, 0.75, 0.25, 0.75]);
    }

    #[test]
    fn forward_shapes_and_roi_stability_with_zero_deltas() {
        let spec = SfSpec::toy(9);
        let store = toy_store(&spec, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(image(32, 4));
        let tokens = p.p("sf.focus.tokens");
        let rois = p.p("sf.focus.rois");
        let mut trace = FocusTrace::default();
        let (out, final_rois) =
            focusing_forward(&mut tape, &p, &spec, img, tokens, rois, Some(&mut trace));
        assert_eq!(tape.value(out).shape(), &[9, spec.cortex_dim]);
        assert_eq!(tape.value(final_rois).shape(), &[9, 4]);
        assert!(tape.nonfinite_op().is_none());
        assert_eq!(trace.stage_rois.len(), spec.focus_iters + 1);
        // delta MLP final layer is zero-initialized -> RoIs never move
        for stage in &trace.stage_rois {
            assert_eq!(stage.data(), trace.stage_rois[0].data());
        }
    }

    #[test]
    fn gradient_reaches_initial_tokens_rois_and_image() {
        let spec = SfSpec::toy(4);
        let mut store = toy_store(&spec, 5);
        // randomize the zero-initialized layers so all paths carry signal
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for name in ["sf.focus.iter.offset.w", "sf.focus.iter.delta.fc2.w", "sf.focus.last.offset.w"] {
            let t = store.get_mut(name);
            let fresh: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-0.02..0.02)).collect();
            *t = Tensor::new(t.shape().to_vec(), fresh);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.leaf(image(32, 6));
        let tokens = tape.leaf(store.get("sf.focus.tokens").clone());
        let rois = tape.leaf(store.get("sf.focus.rois").clone());
        let (out, _) = focusing_forward(&mut tape, &p, &spec, img, tokens, rois, None);
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss);
        for (name, id) in [("image", img), ("tokens", tokens), ("rois", rois)] {
            let g = grads.get(id).unwrap_or_else(|| panic!("no grad reached {name}"));
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} grad all zero");
        }
    }
}
