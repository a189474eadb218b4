use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use fastref::coreset::{select_coreset, CoresetConfig};
use fastref::eval::{auroc, bench_refine, synth_dataset, BenchDims, LabeledScores, SynthSpec};
use fastref::refine::{RefineConfig, RefineEngine, TransformMatrix};
use fastref::scoring::{combine_zero_shot, gaussian_smooth, upsample_bilinear, ScoreMap};
use fastref::tensor_io::{
    read_tensor, write_tensor, FeatureMap, FlatFeatures, ManifestRecord, PrototypeBank,
    RunManifest, Tensor,
};
use fastref::Metric;
use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{BaselineArg, BenchArgs, BuildArgs, EvalArgs, ScoreArgs, SynthArgs};
use crate::Failure;

type Result<T> = std::result::Result<T, Failure>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            let text = serde_json::to_string_pretty(value).expect("report serializes");
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

/// [`read_tensor`] with the path in the error message.
fn read(path: &Path) -> Result<Tensor> {
    read_tensor(path).map_err(|e| in_file(path, e.into()))
}

fn in_file(path: &Path, f: Failure) -> Failure {
    match f {
        Failure::Data { kind, message } => Failure::Data {
            kind,
            message: format!("{}: {message}", path.display()),
        },
        usage => usage,
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::data("threads", e.to_string()))
}

#[derive(Serialize)]
struct SynthSummary {
    spec: SynthSpec,
    grid: usize,
    image_hw: [usize; 2],
    normal: usize,
    anomalous: usize,
    support: String,
    manifest: String,
    /// Planted patch indices per query, in manifest order.
    outliers: Vec<Vec<usize>>,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.grid == 0 || a.upscale == 0 {
        return Err(Failure::Usage(
            "--grid and --upscale must be positive".into(),
        ));
    }
    let spec = SynthSpec {
        seed: a.seed,
        m: a.grid * a.grid,
        n: a.support,
        c: a.channels,
        outliers: a.outliers,
        shift: a.shift,
    };
    let data = synth_dataset(&spec, a.normal, a.anomalous)?;
    let side = a.grid * a.upscale;
    fs::create_dir_all(a.out.join("queries"))?;
    fs::create_dir_all(a.out.join("masks"))?;

    write_tensor(
        &Tensor::from(FlatFeatures::new(data.bank.clone())?),
        a.out.join("support.ftz"),
    )?;
    let mut manifest = RunManifest::default();
    for (idx, q) in data.queries.iter().enumerate() {
        let tensor = PathBuf::from(format!("queries/{idx:04}.ftz"));
        let map = FeatureMap::new(
            a.grid,
            a.grid,
            a.channels,
            q.features.iter().copied().collect(),
        )?;
        write_tensor(&Tensor::from(map), a.out.join(&tensor))?;
        let mask = if q.outliers.is_empty() {
            None
        } else {
            let path = PathBuf::from(format!("masks/{idx:04}.ftz"));
            let mut pixels = Array2::<f32>::zeros((side, side));
            for &p in &q.outliers {
                let (r, c) = (p / a.grid, p % a.grid);
                pixels
                    .slice_mut(ndarray::s![
                        r * a.upscale..(r + 1) * a.upscale,
                        c * a.upscale..(c + 1) * a.upscale
                    ])
                    .fill(1.0);
            }
            write_tensor(&Tensor::from(FlatFeatures::new(pixels)?), a.out.join(&path))?;
            Some(path)
        };
        manifest.records.push(ManifestRecord {
            tensor,
            label: u8::from(!q.outliers.is_empty()),
            mask,
            image_hw: [side, side],
            s_zero: None,
        });
    }
    manifest.save(a.out.join("manifest.jsonl"))?;
    let summary = SynthSummary {
        spec,
        grid: a.grid,
        image_hw: [side, side],
        normal: a.normal,
        anomalous: a.anomalous,
        support: "support.ftz".into(),
        manifest: "manifest.jsonl".into(),
        outliers: data.queries.iter().map(|q| q.outliers.clone()).collect(),
    };
    write_json(&a.out.join("synth.json"), &summary)
}

#[derive(Serialize)]
struct BuildSummary {
    support_rows: usize,
    channels: usize,
    bank_rows: usize,
    metric: Metric,
    ratio: f64,
    /// Selected support rows, in selection order.
    indices: Vec<usize>,
}

pub fn build_prototypes(a: &BuildArgs) -> Result<()> {
    let mut parts = Vec::with_capacity(a.support.len());
    for path in &a.support {
        parts.push(read(path)?.into_flat().into_array());
    }
    let channels = parts[0].ncols();
    if let Some((p, bad)) = a
        .support
        .iter()
        .zip(&parts)
        .find(|(_, x)| x.ncols() != channels)
    {
        return Err(Failure::data(
            "invalid-input",
            format!(
                "{} has {} channels, expected {channels}",
                p.display(),
                bad.ncols()
            ),
        ));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let rows = concatenate(Axis(0), &views).expect("channel counts checked");
    let features = FlatFeatures::new(rows)?;
    let config = CoresetConfig {
        ratio: a.ratio,
        seed: a.seed,
        start_rule: a.start.into(),
    };
    let metric = Metric::from(a.metric);
    let sel = select_coreset(&features, metric, &config)?;
    write_tensor(&Tensor::from(sel.bank.to_flat()), &a.out)?;
    emit_json(
        None,
        &BuildSummary {
            support_rows: features.rows(),
            channels,
            bank_rows: sel.bank.count(),
            metric,
            ratio: a.ratio,
            indices: sel.indices,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub label: u8,
    /// Max of the patch map, or its mean with the zero-shot score.
    pub image_score: f64,
    pub patch_max: f64,
    /// Upsampled, smoothed map, relative to the scores file.
    pub map: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreReport {
    pub baseline: String,
    pub config: RefineConfig,
    pub sigma: f64,
    pub bank_rows: usize,
    pub images: Vec<ImageResult>,
}

/// Query features and their patch grid.
fn load_query(path: &Path) -> Result<(FlatFeatures, usize, usize)> {
    match read(path)? {
        Tensor::Map(m) => {
            let (h, w) = (m.height(), m.width());
            Ok((Tensor::Map(m).into_flat(), h, w))
        }
        Tensor::Flat(f) => {
            let side = (f.rows() as f64).sqrt().round() as usize;
            if side * side != f.rows() {
                return Err(Failure::data(
                    "invalid-input",
                    format!(
                        "{}: rank-2 query with {} rows is not a square grid; store it as rank 3",
                        path.display(),
                        f.rows()
                    ),
                ));
            }
            Ok((f, side, side))
        }
    }
}

fn baseline_name(b: BaselineArg) -> &'static str {
    match b {
        BaselineArg::None => "none",
        BaselineArg::Lstsq => "lstsq",
        BaselineArg::Ttt => "ttt",
    }
}

fn patch_scores(
    engine: &RefineEngine,
    query: &FlatFeatures,
    config: &RefineConfig,
    baseline: BaselineArg,
) -> Result<ndarray::Array1<f64>> {
    let q = engine.prepare(query)?;
    Ok(match baseline {
        BaselineArg::None => {
            let out = engine.refine(&q, config)?;
            engine.score_refinement(&q, &out)
        }
        BaselineArg::Lstsq => {
            let w = TransformMatrix::new(engine.initial_transform(&q))?;
            engine.score_patches(&q, &w)?
        }
        BaselineArg::Ttt => {
            let (w, _, _) = engine.ttt_transform(&q, config.lambda, 100, 1e-8)?;
            engine.score_patches(&q, &TransformMatrix::new(w)?)?
        }
    })
}

fn score_one(
    engine: &RefineEngine,
    rec: &ManifestRecord,
    index: usize,
    a: &ScoreArgs,
    config: &RefineConfig,
    baseline: BaselineArg,
) -> Result<ImageResult> {
    let (query, h, w) = load_query(&rec.tensor)?;
    let scores = patch_scores(engine, &query, config, baseline)?;
    let patches = ScoreMap::from_patches(scores, h, w)?;
    let [ih, iw] = rec.image_hw;
    let pixels = gaussian_smooth(&upsample_bilinear(&patches, ih, iw)?, a.sigma)?;
    let map = format!("maps/{index:04}.ftz");
    write_tensor(&Tensor::from(pixels.to_flat()), a.out.join(&map))?;
    let image_score = match rec.s_zero {
        Some(s) => combine_zero_shot(s, &patches)?.0,
        None => patches.max(),
    };
    Ok(ImageResult {
        index,
        label: rec.label,
        image_score,
        patch_max: patches.max(),
        map,
    })
}

pub fn score(a: &ScoreArgs, is_baseline: bool) -> Result<()> {
    let baseline = match (is_baseline, a.baseline) {
        (false, b) => b.unwrap_or(BaselineArg::None),
        (true, None) => BaselineArg::Ttt,
        (true, Some(BaselineArg::None)) => {
            return Err(Failure::Usage(
                "baseline needs --baseline lstsq or ttt; use score for the refinement".into(),
            ))
        }
        (true, Some(b)) => b,
    };
    if !(a.sigma > 0.0 && a.sigma.is_finite()) {
        return Err(Failure::Usage(format!(
            "--sigma must be positive, got {}",
            a.sigma
        )));
    }
    let config = a.refine.config();
    config.validate()?;
    let manifest = RunManifest::load(&a.manifest).map_err(|e| in_file(&a.manifest, e.into()))?;
    let bank_rows = read(&a.bank)?.into_flat().into_array();
    let bank = PrototypeBank::new(bank_rows, config.metric)?;
    let engine = RefineEngine::new(&bank, config.ridge)?;
    fs::create_dir_all(a.out.join("maps"))?;

    let images = pool(a.threads)?.install(|| {
        manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(i, rec)| score_one(&engine, rec, i, a, &config, baseline))
            .collect::<Result<Vec<_>>>()
    })?;
    let report = ScoreReport {
        baseline: baseline_name(baseline).into(),
        config,
        sigma: a.sigma,
        bank_rows: bank.count(),
        images,
    };
    write_json(&a.out.join("scores.json"), &report)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    image_auroc: f64,
    pixel_auroc: f64,
    images: usize,
    anomalous_images: usize,
    pixels: usize,
    anomalous_pixels: usize,
}

fn load_mask(rec: &ManifestRecord, map: &Array2<f32>) -> Result<Vec<u8>> {
    let Some(path) = &rec.mask else {
        return Ok(vec![0; map.len()]);
    };
    let mask = match read(path)? {
        Tensor::Map(m) if m.channels() == 1 => Tensor::Map(m).into_flat().into_array(),
        Tensor::Map(m) => {
            return Err(Failure::data(
                "invalid-input",
                format!(
                    "{}: mask must be H x W or H x W x 1, got {} channels",
                    path.display(),
                    m.channels()
                ),
            ))
        }
        Tensor::Flat(f) => f.into_array(),
    };
    let dims = mask.dim();
    if dims != map.dim() {
        return Err(Failure::data(
            "invalid-input",
            format!(
                "{}: mask is {}x{} but score map is {}x{}",
                path.display(),
                dims.0,
                dims.1,
                map.nrows(),
                map.ncols()
            ),
        ));
    }
    Ok(mask.iter().map(|&v| u8::from(v > 0.5)).collect())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scores)?;
    let report: ScoreReport = serde_json::from_str(&text)
        .map_err(|e| Failure::data("json", format!("{}: {e}", a.scores.display())))?;
    let manifest = RunManifest::load(&a.manifest).map_err(|e| in_file(&a.manifest, e.into()))?;
    if manifest.records.len() != report.images.len() {
        return Err(Failure::data(
            "invalid-input",
            format!(
                "manifest has {} images but scores cover {}",
                manifest.records.len(),
                report.images.len()
            ),
        ));
    }
    let base = a.scores.parent().unwrap_or(Path::new(""));
    let mut image_scores = Vec::new();
    let mut image_labels = Vec::new();
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for (rec, img) in manifest.records.iter().zip(&report.images) {
        image_scores.push(img.image_score);
        image_labels.push(rec.label);
        let map = read(&base.join(&img.map))?.into_flat().into_array();
        pixel_labels.extend(load_mask(rec, &map)?);
        pixel_scores.extend(map.iter().map(|&v| f64::from(v)));
    }
    let images = LabeledScores::new(image_scores, image_labels)?;
    let pixels = LabeledScores::new(pixel_scores, pixel_labels)?;
    let scope = |what: &str, f: fastref::Error| match Failure::from(f) {
        Failure::Data { kind, message } => Failure::Data {
            kind,
            message: format!("{what} AUROC: {message}"),
        },
        usage => usage,
    };
    let pixel_auroc = auroc(&pixels).map_err(|e| scope("pixel", e))?;
    let image_auroc = auroc(&images).map_err(|e| scope("image", e))?;
    let count = |l: &LabeledScores| l.labels().iter().filter(|&&v| v == 1).count();
    let out = EvalReport {
        image_auroc,
        pixel_auroc,
        images: images.len(),
        anomalous_images: count(&images),
        pixels: pixels.len(),
        anomalous_pixels: count(&pixels),
    };
    emit_json(a.out.as_deref(), &out)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let config = a.refine.config();
    let dims = BenchDims {
        m: a.m,
        n: a.n,
        c: a.c,
    };
    let report = pool(a.threads)?.install(|| bench_refine(dims, &config, a.repeats, a.seed))?;
    emit_json(a.out.as_deref(), &report)
}
