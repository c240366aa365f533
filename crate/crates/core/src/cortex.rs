//! The cortex transformer: inherited encoder blocks over latent tokens,
//! plus the assembled student model (focusing stage + cortex).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::focusing::{focusing_forward, FocusTrace};
use crate::model::{inherit_from_teacher, materialize, sf_manifest, SfSpec};
use crate::nn;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;
use crate::params::{Bound, ParamStore, Role};
use crate::vit::Teacher;
use crate::{Error, Result, Scalar};

/// Inherited encoder blocks then the frozen final layer norm.
/// `seq` is [M, d_cortex]; attention weights are stashed per block/head
/// when `record` is given.
pub fn cortex_blocks<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    spec: &SfSpec,
    seq: VarId,
    mut record: Option<&mut Vec<Tensor<S>>>,
) -> VarId {
    let mut x = seq;
    for i in 0..spec.cortex_depth() {
        x = nn::encoder_block_recorded(
            tape,
            p,
            &format!("sf.cortex.block{i}"),
            x,
            spec.cortex_heads,
            record.as_deref_mut(),
        );
    }
    nn::layer_norm(tape, p, "sf.ln_f", x)
}

/// Prepend the learnable [CLS], run the cortex, and return the final
/// [CLS] representation [1, out_dim] (after the output projection for
/// CLIP-style specs).
pub fn cortex_cls<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    spec: &SfSpec,
    latents: VarId,
    record: Option<&mut Vec<Tensor<S>>>,
) -> VarId {
    let seq = tape.concat_rows(&[p.p("sf.cls"), latents]);
    let x = cortex_blocks(tape, p, spec, seq, record);
    let cls = tape.slice_rows(x, 0, 1);
    if spec.projection.is_some() {
        tape.matmul(cls, p.p("sf.proj_out.w"))
    } else {
        cls
    }
}

/// The assembled SparseFormer student.
pub struct Student<S: Scalar> {
    pub spec: SfSpec,
    pub store: ParamStore<S>,
}

impl<S: Scalar> Student<S> {
    /// Fresh random student (no inheritance) — used by tests.
    pub fn init(spec: SfSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let store = materialize(&sf_manifest(&spec), &mut rng);
        Ok(Student { spec, store })
    }

    /// Student with cortex blocks, final LN, and classifier inherited from
    /// the teacher, partitioned by the `truncate` and `tunable` fields.
    pub fn bootstrapped_from(spec: SfSpec, teacher: &Teacher<S>, seed: u64) -> Result<Self> {
        assert_eq!(spec.donor_depth, teacher.spec.depth, "spec/donor depth mismatch");
        assert_eq!(spec.cortex_dim, teacher.spec.dim, "spec/donor width mismatch");
        let mut student = Self::init(spec, seed)?;
        inherit_from_teacher(&mut student.store, &teacher.store, &student.spec);
        Ok(student)
    }

    fn check_image(&self, image: &Tensor<S>) -> Result<()> {
        if image.rank() != 3
            || image.dim(2) != 3
            || image.dim(0) != self.spec.image
            || image.dim(1) != self.spec.image
        {
            return Err(Error::ResolutionMismatch {
                got_h: if image.rank() == 3 { image.dim(0) } else { 0 },
                got_w: if image.rank() == 3 { image.dim(1) } else { 0 },
                want: self.spec.image,
            });
        }
        if self.spec.image % 4 != 0 {
            return Err(Error::IndivisibleResolution {
                h: self.spec.image,
                w: self.spec.image,
                by: 4,
            });
        }
        Ok(())
    }

    /// Record the full forward pass (focusing + cortex) on a tape whose
    /// parameters are already bound. Returns the [1, out_dim]
    /// representation.
    pub fn repr_on_tape(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        image: &Tensor<S>,
        trace: Option<&mut FocusTrace<S>>,
        record_attention: Option<&mut Vec<Tensor<S>>>,
    ) -> VarId {
        let img = tape.constant(image.clone());
        let tokens = p.p("sf.focus.tokens");
        let rois = p.p("sf.focus.rois");
        let (latents, _) = focusing_forward(tape, p, &self.spec, img, tokens, rois, trace);
        cortex_cls(tape, p, &self.spec, latents, record_attention)
    }

    /// t_sparseformer for one image (no gradients).
    pub fn representation(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.representation_traced(image)?.0)
    }

    /// Representation plus the RoI trace for visualization.
    pub fn representation_traced(&self, image: &Tensor<S>) -> Result<(Tensor<S>, FocusTrace<S>)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let mut trace = FocusTrace::default();
        let cls = self.repr_on_tape(&mut tape, &p, image, Some(&mut trace), None);
        if let Some(op) = tape.nonfinite_op() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok((tape.value(cls).clone(), trace))
    }

    /// Class logits on a bound tape: the normalized [CLS] through the
    /// inherited classifier head (used by the distillation objective).
    pub fn logits_on_tape(&self, tape: &mut Tape<S>, p: &Bound, image: &Tensor<S>) -> VarId {
        let img = tape.constant(image.clone());
        let tokens = p.p("sf.focus.tokens");
        let rois = p.p("sf.focus.rois");
        let (latents, _) = focusing_forward(tape, p, &self.spec, img, tokens, rois, None);
        let seq = tape.concat_rows(&[p.p("sf.cls"), latents]);
        let x = cortex_blocks(tape, p, &self.spec, seq, None);
        let cls = tape.slice_rows(x, 0, 1);
        nn::linear(tape, p, "sf.head", cls)
    }

    /// Run the cortex on an externally supplied latent-token matrix.
    /// Used by the inheritance bypass test; errors on width mismatch.
    pub fn cortex_from_tokens(&self, tokens: &Tensor<S>) -> Result<Tensor<S>> {
        if tokens.rank() != 2 || tokens.cols() != self.spec.cortex_dim {
            return Err(Error::WidthMismatch {
                got: if tokens.rank() == 2 { tokens.cols() } else { 0 },
                want: self.spec.cortex_dim,
            });
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let latents = tape.constant(tokens.clone());
        let cls = cortex_cls(&mut tape, &p, &self.spec, latents, None);
        if let Some(op) = tape.nonfinite_op() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        Ok(tape.value(cls).clone())
    }

    /// Names of parameters per training group; disjoint and exhaustive
    /// over the student store.
    pub fn parameter_groups(&self) -> ParameterGroups {
        let mut g = ParameterGroups::default();
        for (name, param) in self.store.iter() {
            match param.role {
                Role::Fresh => g.focusing.push(name.to_string()),
                Role::Tunable => g.tunable.push(name.to_string()),
                Role::Frozen => g.frozen.push(name.to_string()),
                Role::Teacher => unreachable!("student store holds no teacher tensors"),
            }
        }
        g
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParameterGroups {
    /// Freshly initialized tensors trained at full LR: the focusing
    /// transformer, stem, and [CLS] (a dense head, when present, joins
    /// this group too).
    pub focusing: Vec<String>,
    pub tunable: Vec<String>,
    pub frozen: Vec<String>,
}
