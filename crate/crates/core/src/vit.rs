//! Plain pre-norm ViT encoder: the frozen alignment teacher and the donor
//! of inherited cortex blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::model::{materialize, teacher_manifest, TeacherSpec};
use crate::nn;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;
use crate::params::{Bound, ParamStore};
use crate::{Error, Result, Scalar};

/// Cut an [H,W,3] image into non-overlapping `patch`×`patch` tiles,
/// flattened row-major with channels innermost: [(H/p)·(W/p), p·p·3].
pub fn patchify<S: Scalar>(image: &Tensor<S>, patch: usize) -> Tensor<S> {
    assert_eq!(image.rank(), 3, "patchify: image must be [H,W,C]");
    let (h, w, c) = (image.dim(0), image.dim(1), image.dim(2));
    assert!(h % patch == 0 && w % patch == 0, "patchify: {h}x{w} not divisible by {patch}");
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for iy in 0..patch {
                for ix in 0..patch {
                    let (y, x) = (py * patch + iy, px * patch + ix);
                    let base = (y * w + x) * c;
                    data.extend_from_slice(&image.data()[base..base + c]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], data)
}

pub struct Teacher<S: Scalar> {
    pub spec: TeacherSpec,
    pub store: ParamStore<S>,
}

impl<S: Scalar> Teacher<S> {
    pub fn init(spec: TeacherSpec, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let store = materialize(&teacher_manifest(&spec), &mut rng);
        Teacher { spec, store }
    }

    pub fn from_store(spec: TeacherSpec, store: ParamStore<S>) -> Self {
        Teacher { spec, store }
    }

    fn check_image(&self, image: &Tensor<S>) -> Result<()> {
        if image.rank() != 3 || image.dim(2) != 3 || image.dim(0) != self.spec.image || image.dim(1) != self.spec.image {
            return Err(Error::ResolutionMismatch {
                got_h: if image.rank() == 3 { image.dim(0) } else { 0 },
                got_w: if image.rank() == 3 { image.dim(1) } else { 0 },
                want: self.spec.image,
            });
        }
        Ok(())
    }

    /// Patch-embed + positional embedding + [CLS], then encoder blocks
    /// `[0, upto)`. Returns the full token matrix [tokens, d].
    pub fn tokens_on_tape(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        image: &Tensor<S>,
        upto: usize,
    ) -> VarId {
        assert!(upto <= self.spec.depth);
        let patches = patchify(image, self.spec.patch);
        let patches = tape.constant(patches);
        let emb = nn::linear(tape, p, "teacher.patch", patches);
        let cls = p.p("teacher.cls");
        let seq = tape.concat_rows(&[cls, emb]);
        let seq = tape.add(seq, p.p("teacher.pos"));
        let mut x = seq;
        for i in 0..upto {
            x = nn::encoder_block(tape, p, &format!("teacher.block{i}"), x, self.spec.heads);
        }
        x
    }

    /// Final [CLS] representation: all blocks, final LN, optional output
    /// projection. Shape [1, out_dim].
    pub fn cls_on_tape(&self, tape: &mut Tape<S>, p: &Bound, image: &Tensor<S>) -> VarId {
        let x = self.tokens_on_tape(tape, p, image, self.spec.depth);
        let x = nn::layer_norm(tape, p, "teacher.ln_f", x);
        let cls = tape.slice_rows(x, 0, 1);
        if self.spec.projection.is_some() {
            tape.matmul(cls, p.p("teacher.proj_out.w"))
        } else {
            cls
        }
    }

    /// Class logits from the final [CLS] embedding. Shape [1, classes].
    pub fn logits_on_tape(&self, tape: &mut Tape<S>, p: &Bound, image: &Tensor<S>) -> VarId {
        let x = self.tokens_on_tape(tape, p, image, self.spec.depth);
        let x = nn::layer_norm(tape, p, "teacher.ln_f", x);
        let cls = tape.slice_rows(x, 0, 1);
        nn::linear(tape, p, "teacher.head", cls)
    }

    /// The alignment target t_pretrained for one image (no gradients).
    pub fn representation(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let cls = self.cls_on_tape(&mut tape, &p, image);
        if let Some(op) = tape.nonfinite_op() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(tape.value(cls).clone())
    }

    /// Class logits for one image (no gradients).
    pub fn logits(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let logits = self.logits_on_tape(&mut tape, &p, image);
        if let Some(op) = tape.nonfinite_op() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(tape.value(logits).clone())
    }

    pub fn predict(&self, image: &Tensor<S>) -> Result<u32> {
        let logits = self.logits(image)?;
        let mut best = 0;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = i;
            }
        }
        Ok(best as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, side: usize) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = side * side * 3;
        Tensor::new(vec![side, side, 3], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn patchify_layout() {
        // 4x4x1-style check but with 3 channels: patch content is contiguous
        let side = 4;
        let data: Vec<f32> = (0..side * side * 3).map(|i| i as f32).collect();
        let img = Tensor::new(vec![side, side, 3], data);
        let p = patchify(&img, 2);
        assert_eq!(p.shape(), &[4, 12]);
        // first patch = pixels (0,0),(0,1),(1,0),(1,1)
        let first: Vec<f32> = p.data()[..12].to_vec();
        assert_eq!(first, vec![0., 1., 2., 3., 4., 5., 12., 13., 14., 15., 16., 17.]);
    }

    #[test]
    fn toy_forward_shape_and_determinism() {
        let teacher = Teacher::<f32>::init(TeacherSpec::toy(), 1);
        let img = image(2, 32);
        let a = teacher.representation(&img).unwrap();
        let b = teacher.representation(&img).unwrap();
        assert_eq!(a.shape(), &[1, 64]);
        assert!(a.all_finite());
        assert_eq!(a.data(), b.data(), "same image must give identical output");
    }

    #[test]
    fn distinct_images_give_distinct_targets() {
        let teacher = Teacher::<f32>::init(TeacherSpec::toy(), 1);
        let a = teacher.representation(&image(3, 32)).unwrap();
        let b = teacher.representation(&image(4, 32)).unwrap();
        let dot: f32 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na: f32 = a.data().iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.data().iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(dot / (na * nb) < 0.999, "target must be input-sensitive");
    }

    #[test]
    fn wrong_resolution_is_an_error() {
        let teacher = Teacher::<f32>::init(TeacherSpec::toy(), 1);
        let img = image(5, 16);
        assert!(matches!(
            teacher.representation(&img),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn zeroed_positions_make_patch_order_irrelevant_for_cls() {
        // permutation equivariance of the blocks: with pos = 0 the [CLS]
        // output cannot depend on patch order
        let mut teacher = Teacher::<f32>::init(TeacherSpec::toy(), 7);
        *teacher.store.get_mut("teacher.pos") = Tensor::zeros(vec![teacher.spec.tokens(), 64]);
        let img = image(6, 32);
        let base = teacher.representation(&img).unwrap();

        // swap two patch tiles (8x8 blocks) in the image
        let mut swapped = img.clone();
        for iy in 0..8 {
            for ix in 0..8 {
                for c in 0..3 {
                    let a = ((iy) * 32 + ix) * 3 + c;
                    let b = ((iy) * 32 + (ix + 8)) * 3 + c;
                    let tmp = swapped.data()[a];
                    swapped.data_mut()[a] = swapped.data()[b];
                    swapped.data_mut()[b] = tmp;
                }
            }
        }
        let out = teacher.representation(&swapped).unwrap();
        for (x, y) in base.data().iter().zip(out.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}
