//! Closed-form parameter and multiply-add accounting, RoI visualization
//! as SVG, and a small wall-clock benchmark helper.

use std::path::Path;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Serialize;

use crate::dense_head::HeadSpec;
use crate::focusing::FocusTrace;
use crate::model::{sf_manifest, SfSpec};
use crate::numerics::tensor::Tensor;
use crate::{Result, Scalar};

/// Multiply-add counting convention, recorded verbatim in every report.
pub const COST_CONVENTION: &str =
    "madds counts multiply-accumulate operations; flops = 2 x madds";

#[derive(Clone, Debug, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub label: String,
    pub resolution: usize,
    pub tokens: usize,
    pub convention: String,
    pub modules: Vec<ModuleCost>,
    pub total_params: u64,
    pub total_madds: u64,
    pub total_flops: u64,
}

impl CostReport {
    fn from_modules(label: String, resolution: usize, tokens: usize, modules: Vec<ModuleCost>) -> Self {
        let total_params = modules.iter().map(|m| m.params).sum();
        let total_madds: u64 = modules.iter().map(|m| m.madds).sum();
        CostReport {
            label,
            resolution,
            tokens,
            convention: COST_CONVENTION.to_string(),
            modules,
            total_params,
            total_madds,
            total_flops: 2 * total_madds,
        }
    }

    pub fn module(&self, name: &str) -> &ModuleCost {
        self.modules.iter().find(|m| m.name == name).unwrap_or_else(|| panic!("no module {name}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

fn bucket_of(name: &str) -> &'static str {
    if name.starts_with("sf.stem.") {
        "stem"
    } else if name.starts_with("sf.focus.") || name == "sf.cls" {
        "focusing"
    } else if name.starts_with("sf.cortex.") || name.starts_with("sf.ln_f.") {
        "cortex"
    } else {
        "classifier"
    }
}

/// Exact parameter count per module, summed from tensor declarations
/// (shape arithmetic only — nothing is materialized).
fn param_buckets(spec: &SfSpec) -> [(&'static str, u64); 4] {
    let mut buckets = [("stem", 0u64), ("focusing", 0), ("cortex", 0), ("classifier", 0)];
    for decl in sf_manifest(spec) {
        let b = bucket_of(&decl.name);
        let slot = buckets.iter_mut().find(|(n, _)| *n == b).unwrap();
        slot.1 += decl.elems() as u64;
    }
    buckets
}

/// Multiply-adds of one self-attention over `m` tokens at width `d`:
/// QKV and output projections plus the two `m²`-scaling score terms.
pub fn attention_madds(m: u64, d: u64) -> u64 {
    4 * m * d * d + attention_quadratic_madds(m, d)
}

/// The part of the attention cost that grows with the square of the
/// token count.
pub fn attention_quadratic_madds(m: u64, d: u64) -> u64 {
    2 * m * m * d
}

fn ffn_madds(m: u64, d: u64, ratio: u64) -> u64 {
    2 * m * d * (ratio * d)
}

/// Full encoder block, including the small linear-cost terms
/// (layer norms, softmax, GELU) so the total is honest.
fn block_madds(m: u64, d: u64, ratio: u64) -> u64 {
    attention_madds(m, d) + ffn_madds(m, d, ratio) + 4 * m * d + m * m + m * ratio * d
}

fn linear_madds(rows: u64, d_in: u64, d_out: u64) -> u64 {
    rows * d_in * d_out
}

fn stem_madds(spec: &SfSpec, res: u64) -> u64 {
    let (mid, out) = (spec.stem_mid as u64, spec.stem_out as u64);
    let half = (res / 2) * (res / 2);
    let quarter = (res / 4) * (res / 4);
    half * 9 * 3 * mid + quarter * 9 * mid * out
}

fn focusing_madds(spec: &SfSpec, n: u64) -> u64 {
    let df = spec.focus_dim as u64;
    let dc = spec.cortex_dim as u64;
    let p = spec.sample_points as u64;
    let c = spec.stem_out as u64;
    let ratio = spec.ffn_ratio as u64;
    let sample = n * p * 4 * c; // bilinear: 4 corner MACs per channel
    let per_iter = linear_madds(n, df, 2 * p) // offsets
        + sample
        + linear_madds(n, p * c, df) // feature projection
        + n * df // RoI position encoding (sin/cos pairs)
        + block_madds(n, df, ratio)
        + linear_madds(n, df, df) + linear_madds(n, df, 4); // delta MLP
    let last = linear_madds(n, df, 2 * p) + sample + linear_madds(n, p * c, dc);
    spec.focus_iters as u64 * per_iter + last
}

fn cortex_madds(spec: &SfSpec, n: u64) -> u64 {
    let dc = spec.cortex_dim as u64;
    let m = n + 1; // latent tokens plus [CLS]
    spec.cortex_depth() as u64 * block_madds(m, dc, spec.ffn_ratio as u64) + 2 * m * dc
}

fn classifier_madds(spec: &SfSpec) -> u64 {
    let dc = spec.cortex_dim as u64;
    let mut total = linear_madds(1, dc, spec.classes as u64);
    if let Some(pr) = spec.projection {
        total += linear_madds(1, dc, pr as u64);
    }
    total
}

fn dense_head_madds(spec: &SfSpec, head: &HeadSpec, res: u64, n: u64) -> u64 {
    let dc = spec.cortex_dim as u64;
    let d = head.dim as u64;
    let l = head.classes as u64;
    let c = spec.stem_out as u64;
    let grid = (res / 4) * (res / 4);
    linear_madds(n, dc, d)
        + 2 * block_madds(n, d, head.ffn_ratio as u64)
        + linear_madds(n, d, l)
        + grid * 9 * c * d // dense-query conv
        + linear_madds(n, d, 1) // predictive bias
        + grid * n * d + grid * n * l + grid * n // attention scores, combine, geometric bias
        + grid * 16 * l * 4 // 4x bilinear upsample
}

fn dense_head_params(spec: &SfSpec, head: &HeadSpec) -> u64 {
    crate::dense_head::head_manifest(spec, head).iter().map(|d| d.elems() as u64).sum()
}

/// Cost report at an explicit resolution and token count (`spec.image` and
/// `spec.n_tokens` are overridden, so "what if" queries need no surgery).
pub fn count_flops(
    spec: &SfSpec,
    resolution: usize,
    n_tokens: usize,
    head: Option<&HeadSpec>,
) -> Result<CostReport> {
    let mut spec = spec.clone();
    spec.image = resolution;
    spec.n_tokens = n_tokens;
    spec.validate()?;
    let n = n_tokens as u64;
    let res = resolution as u64;
    let params = param_buckets(&spec);
    let madds = [
        ("stem", stem_madds(&spec, res)),
        ("focusing", focusing_madds(&spec, n)),
        ("cortex", cortex_madds(&spec, n)),
        ("classifier", classifier_madds(&spec)),
    ];
    let mut modules: Vec<ModuleCost> = params
        .iter()
        .zip(madds.iter())
        .map(|(&(name, p), &(name2, m))| {
            assert_eq!(name, name2);
            ModuleCost { name: name.to_string(), params: p, madds: m }
        })
        .collect();
    if let Some(h) = head {
        modules.push(ModuleCost {
            name: "dense_head".to_string(),
            params: dense_head_params(&spec, h),
            madds: dense_head_madds(&spec, h, res, n),
        });
    }
    Ok(CostReport::from_modules(
        format!("d{}x{}@{}px/{}tok", spec.cortex_dim, spec.cortex_depth(), resolution, n_tokens),
        resolution,
        n_tokens,
        modules,
    ))
}

/// Parameter-focused report at the configuration's native resolution and
/// token count.
pub fn count_params(spec: &SfSpec) -> Result<CostReport> {
    count_flops(spec, spec.image, spec.n_tokens, None)
}

const STAGE_COLORS: [&str; 3] = ["#e4572e", "#17bebb", "#ffc914"];
const POINT_COLOR: &str = "#76b041";

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn png_base64<S: Scalar>(image: &Tensor<S>) -> String {
    use image::codecs::png::PngEncoder;
    use image::{ExtendedColorType, ImageEncoder};
    let (h, w) = (image.dim(0), image.dim(1));
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (Scalar::to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(&raw, w as u32, h as u32, ExtendedColorType::Rgb8)
        .expect("in-memory png encode cannot fail");
    BASE64.encode(buf)
}

/// SVG showing the base image, token RoIs at the first, middle, and final
/// focusing stage, and the final-stage sampling points. Output is
/// byte-deterministic for identical inputs.
pub fn roi_svg_string<S: Scalar>(image: &Tensor<S>, trace: &FocusTrace<S>) -> String {
    assert!(
        trace.stage_rois.len() >= 3,
        "trace must contain at least initial, intermediate, and final RoIs"
    );
    let stages = [
        0,
        (trace.stage_rois.len() - 1) / 2,
        trace.stage_rois.len() - 1,
    ];
    let mut svg = String::new();
    svg.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" width=\"512\" height=\"512\">\n");
    svg.push_str(&format!(
        "<image href=\"data:image/png;base64,{}\" x=\"0\" y=\"0\" width=\"1\" height=\"1\" preserveAspectRatio=\"none\"/>\n",
        png_base64(image)
    ));
    for (color, &s) in STAGE_COLORS.iter().zip(&stages) {
        let rois = &trace.stage_rois[s];
        for i in 0..rois.rows() {
            let r = &rois.data()[i * 4..(i + 1) * 4];
            let (x, y, w, h) =
                (r[0].to_f64(), r[1].to_f64(), r[2].to_f64(), r[3].to_f64());
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.004\"/>\n",
                fmt(x - w / 2.0),
                fmt(y - h / 2.0),
                fmt(w),
                fmt(h),
            ));
        }
    }
    let (px, py) = trace
        .final_points
        .as_ref()
        .expect("trace must include final-stage sampling points");
    for (&x, &y) in px.data().iter().zip(py.data()) {
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"0.005\" fill=\"{POINT_COLOR}\"/>\n",
            fmt(x.to_f64()),
            fmt(y.to_f64()),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn render_roi_svg<S: Scalar>(
    image: &Tensor<S>,
    trace: &FocusTrace<S>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, roi_svg_string(image, trace))?;
    Ok(())
}

/// Mean wall-clock milliseconds of `f` over `runs` calls after `warmup`
/// discarded calls.
pub fn time_ms(mut f: impl FnMut(), warmup: usize, runs: usize) -> f64 {
    assert!(runs >= 1);
    for _ in 0..warmup {
        f();
    }
    let start = Instant::now();
    for _ in 0..runs {
        f();
    }
    start.elapsed().as_secs_f64() * 1e3 / runs as f64
}

/// Relative forward-pass timing (ratios are the meaningful output; the
/// absolute numbers depend on the host).
#[derive(Clone, Debug, Serialize)]
pub struct BenchComparison {
    pub teacher_ms: f64,
    pub student_ms: f64,
    pub student_over_teacher: f64,
}

pub fn bench_pair<S: Scalar>(
    teacher: &crate::vit::Teacher<S>,
    student: &crate::cortex::Student<S>,
    image: &Tensor<S>,
    runs: usize,
) -> Result<BenchComparison> {
    teacher.representation(image)?;
    student.representation(image)?;
    let teacher_ms = time_ms(|| drop(teacher.representation(image)), 1, runs);
    let student_ms = time_ms(|| drop(student.representation(image)), 1, runs);
    Ok(BenchComparison { teacher_ms, student_ms, student_over_teacher: student_ms / teacher_ms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cortex::Student;
    use crate::model::materialize;

    #[test]
    fn params_match_materialized_model_exactly() {
        for spec in [SfSpec::toy(8), SfSpec::sf_b(), SfSpec::sf_l()] {
            let report = count_params(&spec).unwrap();
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
            let store = materialize::<f32, _>(&sf_manifest(&spec), &mut rng);
            assert_eq!(report.total_params, store.total_elems() as u64, "{}", report.label);
        }
    }

    #[test]
    fn totals_equal_sum_of_parts() {
        let r = count_flops(&SfSpec::sf_b(), 224, 49, None).unwrap();
        assert_eq!(r.total_params, r.modules.iter().map(|m| m.params).sum::<u64>());
        assert_eq!(r.total_madds, r.modules.iter().map(|m| m.madds).sum::<u64>());
        assert_eq!(r.total_flops, 2 * r.total_madds);
        assert!(r.convention.contains("2 x madds"));
    }

    #[test]
    fn resolution_only_moves_the_stem() {
        let a = count_flops(&SfSpec::sf_b(), 224, 49, None).unwrap();
        let b = count_flops(&SfSpec::sf_b(), 448, 49, None).unwrap();
        assert!(b.module("stem").madds > a.module("stem").madds);
        assert_eq!(b.module("cortex").madds, a.module("cortex").madds);
        assert_eq!(b.module("focusing").madds, a.module("focusing").madds);
    }

    #[test]
    fn flops_are_monotone_in_tokens_and_width() {
        let base = count_flops(&SfSpec::sf_b(), 224, 49, None).unwrap();
        let more_tokens = count_flops(&SfSpec::sf_b(), 224, 81, None).unwrap();
        assert!(more_tokens.total_madds > base.total_madds);
        let wider = count_flops(&SfSpec::sf_l(), 224, 49, None).unwrap();
        assert!(wider.total_madds > base.total_madds);
        let deeper = count_flops(&SfSpec::sf_b().without_truncation(), 224, 49, None).unwrap();
        assert!(deeper.total_madds > base.total_madds);
    }

    #[test]
    fn attention_quadratic_term_scales_as_token_count_squared() {
        for d in [64u64, 384, 768] {
            for m in [8u64, 50, 257] {
                let ratio =
                    attention_quadratic_madds(2 * m, d) as f64 / attention_quadratic_madds(m, d) as f64;
                assert_eq!(ratio, 4.0);
            }
        }
    }

    #[test]
    fn dense_head_is_counted_when_requested() {
        let spec = SfSpec::sf_b();
        let head = HeadSpec::full_scale(150);
        let without = count_flops(&spec, 224, 49, None).unwrap();
        let with = count_flops(&spec, 224, 49, Some(&head)).unwrap();
        assert!(with.total_madds > without.total_madds);
        assert!(with.module("dense_head").params > 0);
    }

    #[test]
    fn svg_has_the_contracted_element_counts_and_is_deterministic() {
        let spec = SfSpec::toy(4);
        let student = Student::<f32>::init(spec, 5).unwrap();
        let image = Tensor::new(vec![32, 32, 3], vec![0.25; 32 * 32 * 3]);
        let (_, trace) = student.representation_traced(&image).unwrap();
        let svg1 = roi_svg_string(&image, &trace);
        let svg2 = roi_svg_string(&image, &trace);
        assert_eq!(svg1, svg2);
        assert_eq!(svg1.matches("<rect").count(), 3 * 4);
        assert_eq!(svg1.matches("<circle").count(), 4 * 4); // N=4, P=4
        assert!(svg1.contains("data:image/png;base64,"));
    }

    use rand::SeedableRng;
}
