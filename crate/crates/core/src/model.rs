//! Model specifications and tensor manifests.
//!
//! A manifest is the single source of truth for every parameter tensor of
//! a model: name, shape, training role, and initializer. Builders
//! materialize stores from it and the cost accounting sums shapes from it,
//! so the two can never drift apart.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::tensor::Tensor;
use crate::params::{ParamStore, Role};
use crate::Scalar;

/// Plain ViT teacher configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub classes: usize,
    /// CLIP-style output projection width; `None` for classifier teachers.
    pub projection: Option<usize>,
}

impl TeacherSpec {
    /// ViT-B/16 at 224 resolution (the SF-B donor).
    pub fn vit_b16() -> Self {
        TeacherSpec {
            image: 224,
            patch: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            ffn_ratio: 4,
            classes: 1000,
            projection: None,
        }
    }

    /// ViT-L/16 at 224 resolution (the SF-L donor).
    pub fn vit_l16() -> Self {
        TeacherSpec {
            image: 224,
            patch: 16,
            dim: 1024,
            depth: 24,
            heads: 16,
            ffn_ratio: 4,
            classes: 1000,
            projection: None,
        }
    }

    /// Desk-scale teacher for the toy training and bootstrap runs.
    pub fn toy() -> Self {
        TeacherSpec {
            image: 32,
            patch: 8,
            dim: 64,
            depth: 6,
            heads: 4,
            ffn_ratio: 4,
            classes: 4,
            projection: None,
        }
    }

    /// Sequence length including the [CLS] token.
    pub fn tokens(&self) -> usize {
        let side = self.image / self.patch;
        side * side + 1
    }

    /// Width of the alignment target vector.
    pub fn out_dim(&self) -> usize {
        self.projection.unwrap_or(self.dim)
    }
}

/// SparseFormer student configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfSpec {
    pub image: usize,
    pub stem_mid: usize,
    pub stem_out: usize,
    pub n_tokens: usize,
    pub sample_points: usize,
    pub focus_iters: usize,
    pub focus_dim: usize,
    pub focus_heads: usize,
    pub ffn_ratio: usize,
    pub cortex_dim: usize,
    pub cortex_heads: usize,
    /// Depth of the donor the cortex inherits from.
    pub donor_depth: usize,
    /// Leading donor blocks discarded.
    pub truncate: usize,
    /// Kept blocks (from the front) that fine-tune at reduced LR.
    pub tunable: usize,
    pub classes: usize,
    pub projection: Option<usize>,
}

impl SfSpec {
    /// Derive a student from its donor: truncate the leading third of the
    /// blocks and tune the next third, with the focusing transformer at
    /// half the cortex width.
    pub fn from_teacher(teacher: &TeacherSpec, n_tokens: usize) -> Self {
        let truncate = teacher.depth / 3;
        let kept = teacher.depth - truncate;
        SfSpec {
            image: teacher.image,
            stem_mid: 32,
            stem_out: 64,
            n_tokens,
            sample_points: 16,
            focus_iters: 4,
            focus_dim: teacher.dim / 2,
            focus_heads: (teacher.heads / 2).max(1),
            ffn_ratio: teacher.ffn_ratio,
            cortex_dim: teacher.dim,
            cortex_heads: teacher.heads,
            donor_depth: teacher.depth,
            truncate,
            tunable: kept / 2,
            classes: teacher.classes,
            projection: teacher.projection,
        }
    }

    pub fn sf_b() -> Self {
        Self::from_teacher(&TeacherSpec::vit_b16(), 49)
    }

    pub fn sf_l() -> Self {
        Self::from_teacher(&TeacherSpec::vit_l16(), 49)
    }

    pub fn without_truncation(mut self) -> Self {
        let kept = self.donor_depth;
        self.truncate = 0;
        self.tunable = kept / 2;
        self
    }

    /// Toy student for the bootstrap acceptance runs.
    pub fn toy(n_tokens: usize) -> Self {
        let teacher = TeacherSpec::toy();
        let mut s = Self::from_teacher(&teacher, n_tokens);
        s.stem_mid = 8;
        s.stem_out = 16;
        s.sample_points = 4;
        s.focus_heads = 2;
        s
    }

    pub fn cortex_depth(&self) -> usize {
        self.donor_depth - self.truncate
    }

    pub fn out_dim(&self) -> usize {
        self.projection.unwrap_or(self.cortex_dim)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.donor_depth < 3 {
            return Err(crate::Error::DepthTooSmall { depth: self.donor_depth });
        }
        if self.truncate >= self.donor_depth {
            return Err(crate::Error::TruncateOutOfRange {
                truncate: self.truncate,
                depth: self.donor_depth,
            });
        }
        assert!(self.focus_dim % 8 == 0, "focus width must be divisible by 8 for the RoI encoding");
        assert!(self.focus_dim % self.focus_heads == 0);
        assert!(self.cortex_dim % self.cortex_heads == 0);
        let k = (self.sample_points as f64).sqrt() as usize;
        assert!(k * k == self.sample_points, "sample point count must be a perfect square");
        Ok(())
    }
}

/// How a declared tensor is filled at build time.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Sampling-offset bias: a √P×√P grid spanning [-0.5, 0.5]².
    OffsetGrid,
    /// Initial RoIs: a ⌈√N⌉-grid of boxes covering the image.
    RoiGrid,
}

#[derive(Clone, Debug)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub init: Init,
}

impl TensorDecl {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, role: Role, init: Init) -> Self {
        TensorDecl { name: name.into(), shape, role, init }
    }

    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Standard encoder block tensors under `{prefix}.`: layer norms, fused
/// qkv, output projection, and the GELU FFN pair.
pub fn block_decls(prefix: &str, dim: usize, ratio: usize, role: Role) -> Vec<TensorDecl> {
    let hidden = ratio * dim;
    vec![
        TensorDecl::new(format!("{prefix}.ln1.g"), vec![dim], role, Init::Ones),
        TensorDecl::new(format!("{prefix}.ln1.b"), vec![dim], role, Init::Zeros),
        TensorDecl::new(format!("{prefix}.qkv.w"), vec![dim, 3 * dim], role, Init::Normal(0.02)),
        TensorDecl::new(format!("{prefix}.qkv.b"), vec![3 * dim], role, Init::Zeros),
        TensorDecl::new(format!("{prefix}.proj.w"), vec![dim, dim], role, Init::Normal(0.02)),
        TensorDecl::new(format!("{prefix}.proj.b"), vec![dim], role, Init::Zeros),
        TensorDecl::new(format!("{prefix}.ln2.g"), vec![dim], role, Init::Ones),
        TensorDecl::new(format!("{prefix}.ln2.b"), vec![dim], role, Init::Zeros),
        TensorDecl::new(format!("{prefix}.fc1.w"), vec![dim, hidden], role, Init::Normal(0.02)),
        TensorDecl::new(format!("{prefix}.fc1.b"), vec![hidden], role, Init::Zeros),
        TensorDecl::new(format!("{prefix}.fc2.w"), vec![hidden, dim], role, Init::Normal(0.02)),
        TensorDecl::new(format!("{prefix}.fc2.b"), vec![dim], role, Init::Zeros),
    ]
}

/// Every tensor of a plain ViT teacher.
pub fn teacher_manifest(spec: &TeacherSpec) -> Vec<TensorDecl> {
    let d = spec.dim;
    let role = Role::Teacher;
    let mut decls = vec![
        TensorDecl::new("teacher.patch.w", vec![spec.patch * spec.patch * 3, d], role, Init::Normal(0.02)),
        TensorDecl::new("teacher.patch.b", vec![d], role, Init::Zeros),
        TensorDecl::new("teacher.cls", vec![1, d], role, Init::Normal(0.02)),
        TensorDecl::new("teacher.pos", vec![spec.tokens(), d], role, Init::Normal(0.02)),
    ];
    for i in 0..spec.depth {
        decls.extend(block_decls(&format!("teacher.block{i}"), d, spec.ffn_ratio, role));
    }
    decls.push(TensorDecl::new("teacher.ln_f.g", vec![d], role, Init::Ones));
    decls.push(TensorDecl::new("teacher.ln_f.b", vec![d], role, Init::Zeros));
    if let Some(p) = spec.projection {
        decls.push(TensorDecl::new("teacher.proj_out.w", vec![d, p], role, Init::Normal(0.02)));
    }
    decls.push(TensorDecl::new("teacher.head.w", vec![d, spec.classes], role, Init::Normal(0.02)));
    decls.push(TensorDecl::new("teacher.head.b", vec![spec.classes], role, Init::Zeros));
    decls
}

/// Every tensor of a SparseFormer student.
///
/// Cortex block `i` corresponds to donor block `truncate + i`; the first
/// `tunable` of them fine-tune, the rest stay frozen along with the final
/// layer norm and classifier/projection.
pub fn sf_manifest(spec: &SfSpec) -> Vec<TensorDecl> {
    let df = spec.focus_dim;
    let dc = spec.cortex_dim;
    let p = spec.sample_points;
    let fresh = Role::Fresh;
    let mut decls = vec![
        TensorDecl::new("sf.stem.conv1.w", vec![3, 3, 3, spec.stem_mid], fresh, Init::Normal(0.02)),
        TensorDecl::new("sf.stem.conv1.b", vec![spec.stem_mid], fresh, Init::Zeros),
        TensorDecl::new("sf.stem.conv2.w", vec![3, 3, spec.stem_mid, spec.stem_out], fresh, Init::Normal(0.02)),
        TensorDecl::new("sf.stem.conv2.b", vec![spec.stem_out], fresh, Init::Zeros),
        TensorDecl::new("sf.focus.tokens", vec![spec.n_tokens, df], fresh, Init::Normal(0.02)),
        TensorDecl::new("sf.focus.rois", vec![spec.n_tokens, 4], fresh, Init::RoiGrid),
        TensorDecl::new("sf.focus.iter.offset.w", vec![df, 2 * p], fresh, Init::Zeros),
        TensorDecl::new("sf.focus.iter.offset.b", vec![2 * p], fresh, Init::OffsetGrid),
        TensorDecl::new("sf.focus.iter.featproj.w", vec![p * spec.stem_out, df], fresh, Init::Normal(0.02)),
        TensorDecl::new("sf.focus.iter.featproj.b", vec![df], fresh, Init::Zeros),
    ];
    decls.extend(block_decls("sf.focus.iter", df, spec.ffn_ratio, fresh));
    decls.extend([
        TensorDecl::new("sf.focus.iter.delta.fc1.w", vec![df, df], fresh, Init::Normal(0.02)),
        TensorDecl::new("sf.focus.iter.delta.fc1.b", vec![df], fresh, Init::Zeros),
        TensorDecl::new("sf.focus.iter.delta.fc2.w", vec![df, 4], fresh, Init::Zeros),
        TensorDecl::new("sf.focus.iter.delta.fc2.b", vec![4], fresh, Init::Zeros),
        TensorDecl::new("sf.focus.last.offset.w", vec![df, 2 * p], fresh, Init::Zeros),
        TensorDecl::new("sf.focus.last.offset.b", vec![2 * p], fresh, Init::OffsetGrid),
        TensorDecl::new("sf.focus.last.featproj.w", vec![p * spec.stem_out, dc], fresh, Init::Normal(0.02)),
        TensorDecl::new("sf.focus.last.featproj.b", vec![dc], fresh, Init::Zeros),
        TensorDecl::new("sf.cls", vec![1, dc], fresh, Init::Normal(0.02)),
    ]);
    for i in 0..spec.cortex_depth() {
        let role = if i < spec.tunable { Role::Tunable } else { Role::Frozen };
        decls.extend(block_decls(&format!("sf.cortex.block{i}"), dc, spec.ffn_ratio, role));
    }
    decls.push(TensorDecl::new("sf.ln_f.g", vec![dc], Role::Frozen, Init::Ones));
    decls.push(TensorDecl::new("sf.ln_f.b", vec![dc], Role::Frozen, Init::Zeros));
    if let Some(pr) = spec.projection {
        decls.push(TensorDecl::new("sf.proj_out.w", vec![dc, pr], Role::Frozen, Init::Normal(0.02)));
    }
    decls.push(TensorDecl::new("sf.head.w", vec![dc, spec.classes], Role::Frozen, Init::Normal(0.02)));
    decls.push(TensorDecl::new("sf.head.b", vec![spec.classes], Role::Frozen, Init::Zeros));
    decls
}

/// Initial RoIs: the tightest square grid holding `n` boxes, row-major,
/// truncated to the first `n` cells; each box is one grid cell.
pub fn roi_grid<S: Scalar>(n: usize) -> Tensor<S> {
    assert!(n >= 1);
    let g = (n as f64).sqrt().ceil() as usize;
    let size = S::from_f64(1.0 / g as f64);
    let mut data = Vec::with_capacity(n * 4);
    'outer: for iy in 0..g {
        for ix in 0..g {
            if data.len() == n * 4 {
                break 'outer;
            }
            data.push(S::from_f64((ix as f64 + 0.5) / g as f64));
            data.push(S::from_f64((iy as f64 + 0.5) / g as f64));
            data.push(size);
            data.push(size);
        }
    }
    Tensor::new(vec![n, 4], data)
}

/// Offset-bias layout: `p` x-offsets then `p` y-offsets, filled from a
/// √p×√p grid spanning [-0.5, 0.5]² inclusive (row-major).
pub fn offset_grid_bias<S: Scalar>(p: usize) -> Tensor<S> {
    let k = (p as f64).sqrt() as usize;
    assert!(k * k == p, "sample point count must be a perfect square");
    let coord = |i: usize| -> f64 {
        if k == 1 {
            0.0
        } else {
            -0.5 + i as f64 / (k - 1) as f64
        }
    };
    let mut xs = Vec::with_capacity(p);
    let mut ys = Vec::with_capacity(p);
    for iy in 0..k {
        for ix in 0..k {
            xs.push(S::from_f64(coord(ix)));
            ys.push(S::from_f64(coord(iy)));
        }
    }
    xs.extend(ys);
    Tensor::new(vec![2 * p], xs)
}

fn init_tensor<S: Scalar, R: Rng>(decl: &TensorDecl, rng: &mut R) -> Tensor<S> {
    match decl.init {
        Init::Zeros => Tensor::zeros(decl.shape.clone()),
        Init::Ones => Tensor::filled(decl.shape.clone(), S::one()),
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).unwrap();
            let data = (0..decl.elems()).map(|_| S::from_f64(dist.sample(rng))).collect();
            Tensor::new(decl.shape.clone(), data)
        }
        Init::OffsetGrid => {
            let t = offset_grid_bias::<S>(decl.shape[0] / 2);
            assert_eq!(t.shape(), &decl.shape[..]);
            t
        }
        Init::RoiGrid => {
            let t = roi_grid::<S>(decl.shape[0]);
            assert_eq!(t.shape(), &decl.shape[..]);
            t
        }
    }
}

/// Materialize a manifest into a parameter store (draw order = manifest
/// order, so a fixed seed reproduces the same weights).
pub fn materialize<S: Scalar, R: Rng>(decls: &[TensorDecl], rng: &mut R) -> ParamStore<S> {
    let mut store = ParamStore::new();
    for decl in decls {
        store.insert(&decl.name, init_tensor(decl, rng), decl.role);
    }
    store
}

/// Copy inherited donor tensors into a freshly materialized student store:
/// cortex block `i` takes donor block `truncate + i`, and the final LN +
/// classifier (+ projection) transfer verbatim.
pub fn inherit_from_teacher<S: Scalar>(
    student: &mut ParamStore<S>,
    teacher: &ParamStore<S>,
    spec: &SfSpec,
) {
    const BLOCK_FIELDS: [&str; 12] = [
        "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "ln2.g", "ln2.b", "fc1.w",
        "fc1.b", "fc2.w", "fc2.b",
    ];
    for i in 0..spec.cortex_depth() {
        let src_idx = spec.truncate + i;
        for f in BLOCK_FIELDS {
            let src = teacher.get(&format!("teacher.block{src_idx}.{f}"));
            let dst = student.get_mut(&format!("sf.cortex.block{i}.{f}"));
            assert_eq!(dst.shape(), src.shape(), "donor/student shape mismatch at block {i} {f}");
            *dst = src.clone();
        }
    }
    for (src, dst) in [
        ("teacher.ln_f.g", "sf.ln_f.g"),
        ("teacher.ln_f.b", "sf.ln_f.b"),
        ("teacher.head.w", "sf.head.w"),
        ("teacher.head.b", "sf.head.b"),
    ] {
        *student.get_mut(dst) = teacher.get(src).clone();
    }
    if spec.projection.is_some() {
        *student.get_mut("sf.proj_out.w") = teacher.get("teacher.proj_out.w").clone();
    }
}
