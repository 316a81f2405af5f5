//! Reduced adversarial-training experiment and synthetic reduction checks.
//!
//! Images are resized to 12x12, flattened to 144 pixels and mapped to 10
//! features by a fixed random projection. The attack acts on pixels; the
//! model is a bias-free `10 -> 4 -> 5` tanh network (60 parameters).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{BenchConfig, RunConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::readout::{build_system, prepare_task, stacked_lift, trajectory_radius};
use crate::solver::{solve_forward, solve_linear_system};
use crate::sparse::{dist2, norm2};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 12;
pub const PIXELS: usize = SIDE * SIDE;
pub const FEATURES: usize = 10;
pub const HIDDEN: usize = 4;
pub const CLASSES: usize = 5;
pub const PARAMS: usize = FEATURES * HIDDEN + HIDDEN * CLASSES;

#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let (count, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format(format!("image file has {} bytes, header needs {need}", bytes.len())));
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..need].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + count {
        return Err(Error::Format("truncated label file".into()));
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Overlap weights of output cells with input cells along one axis.
fn area_weights(inp: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < inp {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

fn bilinear_weights(inp: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..out)
        .map(|o| {
            let x = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            let i = x.floor() as usize;
            let f = x - i as f64;
            if i + 1 < inp && f > 0.0 { vec![(i, 1.0 - f), (i + 1, f)] } else { vec![(i, 1.0)] }
        })
        .collect()
}

/// Separable resize: exact area averaging when shrinking, bilinear when growing.
pub fn resize(img: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let wy = if oh <= h { area_weights(h, oh) } else { bilinear_weights(h, oh) };
    let wx = if ow <= w { area_weights(w, ow) } else { bilinear_weights(w, ow) };
    let mut out = vec![0.0; oh * ow];
    for (r, ry) in wy.iter().enumerate() {
        for (c, cx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(i, a) in ry {
                for &(j, b) in cx {
                    acc += a * b * img[i * w + j];
                }
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Row-major `FEATURES x PIXELS` projection with `N(0, 1) / sqrt(FEATURES)` entries.
pub fn random_projection(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let s = (FEATURES as f64).sqrt();
    (0..FEATURES * PIXELS).map(|_| normal.sample(&mut rng) / s).collect()
}

pub fn project(p: &[f64], x: &[f64]) -> Vec<f64> {
    (0..FEATURES).map(|i| p[i * PIXELS..(i + 1) * PIXELS].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    /// Flattened 12x12 images with pixels in `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataMeta {
    pub source: String,
    pub resize: String,
    pub projection: String,
    pub seed: u64,
    pub train_histogram: Vec<usize>,
    pub test_histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ReducedData {
    pub train: Split,
    pub test: Split,
    pub projection: Vec<f64>,
    pub meta: DataMeta,
}

const IDX_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

fn idx_split(images: &[u8], labels: &[u8], per_class: usize) -> Result<Split> {
    let imgs = parse_idx_images(images)?;
    let labs = parse_idx_labels(labels)?;
    if labs.len() != imgs.count {
        return Err(Error::Format(format!("{} images but {} labels", imgs.count, labs.len())));
    }
    let px = imgs.rows * imgs.cols;
    let mut taken = [0usize; CLASSES];
    let mut split = Split::default();
    for (k, &l) in labs.iter().enumerate() {
        let l = l as usize;
        if l >= CLASSES || taken[l] >= per_class {
            continue;
        }
        taken[l] += 1;
        let raw: Vec<f64> = imgs.pixels[k * px..(k + 1) * px].iter().map(|&b| b as f64 / 255.0).collect();
        split.images.push(resize(&raw, imgs.rows, imgs.cols, SIDE, SIDE));
        split.labels.push(l);
    }
    Ok(split)
}

/// Deterministic 28x28 class-conditional blob images, resized like real data.
pub fn synthetic_split(per_class: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("noise normal");
    // Two blob centres per class, on a ring so classes overlap partially.
    let centres: Vec<[(f64, f64); 2]> = (0..CLASSES)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / CLASSES as f64;
            let b = a + 2.2;
            [(14.0 + 6.0 * a.cos(), 14.0 + 6.0 * a.sin()), (14.0 + 4.0 * b.cos(), 14.0 + 4.0 * b.sin())]
        })
        .collect();
    let mut split = Split::default();
    for _ in 0..per_class {
        for (c, cs) in centres.iter().enumerate() {
            let jitter: Vec<(f64, f64)> =
                cs.iter().map(|&(y, x)| (y + rng.random_range(-2.0..2.0), x + rng.random_range(-2.0..2.0))).collect();
            let width = rng.random_range(2.5..4.0);
            let mut img = vec![0.0; 28 * 28];
            for i in 0..28 {
                for j in 0..28 {
                    let mut v = 0.0;
                    for &(y, x) in &jitter {
                        let r2 = (i as f64 - y).powi(2) + (j as f64 - x).powi(2);
                        v += (-r2 / (2.0 * width * width)).exp();
                    }
                    img[i * 28 + j] = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            split.images.push(resize(&img, 28, 28, SIDE, SIDE));
            split.labels.push(c);
        }
    }
    split
}

/// IDX files from `dir` (digits 0-4 only), or the synthetic fallback when absent.
pub fn load_mnist_reduced(dir: Option<&Path>, cfg: &BenchConfig, seed: u64) -> Result<ReducedData> {
    let files = dir.map(|d| IDX_FILES.map(|f| d.join(f)));
    let (train, test, source) = match files {
        Some(f) if f.iter().all(|p| p.exists()) => {
            let read = |p: &Path| fs::read(p).map_err(Error::from);
            (
                idx_split(&read(&f[0])?, &read(&f[1])?, cfg.train_per_class)?,
                idx_split(&read(&f[2])?, &read(&f[3])?, cfg.test_per_class)?,
                format!("IDX files in {}", dir.unwrap().display()),
            )
        }
        _ => (
            synthetic_split(cfg.train_per_class, seed ^ 0x5eed_0001),
            synthetic_split(cfg.test_per_class, seed ^ 0x5eed_0002),
            "synthetic Gaussian-blob digits (IDX files not found)".to_string(),
        ),
    };
    let meta = DataMeta {
        source,
        resize: "28x28 -> 12x12 exact area averaging (bilinear when upsampling)".into(),
        projection: "144 -> 10, N(0,1)/sqrt(10) entries from the run seed".into(),
        seed,
        train_histogram: train.histogram().to_vec(),
        test_histogram: test.histogram().to_vec(),
    };
    Ok(ReducedData { train, test, projection: random_projection(seed), meta })
}

/// Bias-free `10 -> 4 -> 5` tanh network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    /// `HIDDEN x FEATURES`, row-major.
    pub w1: Vec<f64>,
    /// `CLASSES x HIDDEN`, row-major.
    pub w2: Vec<f64>,
}

impl ReducedModel {
    pub fn init(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let w1 = (0..HIDDEN * FEATURES).map(|_| scale * normal.sample(&mut rng) / (FEATURES as f64).sqrt()).collect();
        let w2 = (0..CLASSES * HIDDEN).map(|_| scale * normal.sample(&mut rng) / (HIDDEN as f64).sqrt()).collect();
        Self { w1, w2 }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.w2).all(|x| x.is_finite())
    }

    fn hidden(&self, z: &[f64]) -> [f64; HIDDEN] {
        let mut h = [0.0; HIDDEN];
        for (k, hk) in h.iter_mut().enumerate() {
            *hk = self.w1[k * FEATURES..(k + 1) * FEATURES].iter().zip(z).map(|(a, b)| a * b).sum::<f64>().tanh();
        }
        h
    }

    fn logits(&self, h: &[f64; HIDDEN]) -> [f64; CLASSES] {
        let mut o = [0.0; CLASSES];
        for (c, oc) in o.iter_mut().enumerate() {
            *oc = self.w2[c * HIDDEN..(c + 1) * HIDDEN].iter().zip(h).map(|(a, b)| a * b).sum();
        }
        o
    }

    pub fn predict(&self, proj: &[f64], x: &[f64]) -> usize {
        let o = self.logits(&self.hidden(&project(proj, x)));
        (0..CLASSES).fold(0, |best, c| if o[c] > o[best] { c } else { best })
    }

    /// Softmax cross-entropy with gradients in the weights and the pixels.
    pub fn loss_grad(&self, proj: &[f64], x: &[f64], y: usize, want_w: bool) -> (f64, Vec<f64>, Vec<f64>) {
        let z = project(proj, x);
        let h = self.hidden(&z);
        let o = self.logits(&h);
        let mx = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let den: f64 = o.iter().map(|v| (v - mx).exp()).sum();
        let loss = den.ln() + mx - o[y];
        let mut dl = [0.0; CLASSES];
        for c in 0..CLASSES {
            dl[c] = (o[c] - mx).exp() / den - f64::from(u8::from(c == y));
        }
        let mut da = [0.0; HIDDEN];
        for k in 0..HIDDEN {
            let dh: f64 = (0..CLASSES).map(|c| self.w2[c * HIDDEN + k] * dl[c]).sum();
            da[k] = dh * (1.0 - h[k] * h[k]);
        }
        let mut dz = [0.0; FEATURES];
        for (i, dzi) in dz.iter_mut().enumerate() {
            *dzi = (0..HIDDEN).map(|k| self.w1[k * FEATURES + i] * da[k]).sum();
        }
        let mut dx = vec![0.0; PIXELS];
        for (i, dzi) in dz.iter().enumerate() {
            for (p, dxp) in dx.iter_mut().enumerate() {
                *dxp += proj[i * PIXELS + p] * dzi;
            }
        }
        let mut gw = Vec::new();
        if want_w {
            gw.reserve(PARAMS);
            for k in 0..HIDDEN {
                gw.extend(z.iter().map(|zi| da[k] * zi));
            }
            for c in 0..CLASSES {
                gw.extend(h.iter().map(|hk| dl[c] * hk));
            }
        }
        (loss, gw, dx)
    }
}

/// L-infinity PGD from `delta = 0` with sign steps, projection to the ball and the pixel box.
/// Returns the final perturbed input and whether any iterate was misclassified.
pub fn pgd_attack(model: &ReducedModel, proj: &[f64], x: &[f64], y: usize, eps: f64, step: f64, steps: usize) -> (Vec<f64>, bool) {
    let mut xa = x.to_vec();
    let mut fooled = model.predict(proj, &xa) != y;
    for _ in 0..steps {
        let (_, _, g) = model.loss_grad(proj, &xa, y, false);
        for p in 0..PIXELS {
            let d = (xa[p] - x[p] + step * crate::polyapprox::sign(g[p])).clamp(-eps, eps);
            xa[p] = (x[p] + d).clamp(0.0, 1.0);
        }
        fooled |= model.predict(proj, &xa) != y;
    }
    (xa, fooled)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub clean_loss: f64,
}

/// A point counts as robust when no PGD iterate (including the clean input) is misclassified.
pub fn pgd_evaluate(model: &ReducedModel, data: &ReducedData, split: &Split, eps: f64, step: f64, steps: usize) -> EvalResult {
    let (mut clean, mut robust, mut loss) = (0usize, 0usize, 0.0);
    for (x, &y) in split.images.iter().zip(&split.labels) {
        clean += usize::from(model.predict(&data.projection, x) == y);
        loss += model.loss_grad(&data.projection, x, y, false).0;
        let (_, fooled) = pgd_attack(model, &data.projection, x, y, eps, step, steps);
        robust += usize::from(!fooled);
    }
    let n = split.len().max(1) as f64;
    EvalResult { clean_acc: clean as f64 / n, robust_acc: robust as f64 / n, clean_loss: loss / n }
}

pub fn mode_name(alpha: f64) -> &'static str {
    if alpha == 0.0 {
        "clean"
    } else if alpha == 1.0 {
        "robust"
    } else {
        "mixed"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub mode: String,
    pub alpha: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub clean_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub alpha: f64,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub diverged: bool,
    pub model: ReducedModel,
}

/// SGD on `(1 - alpha) L_clean + alpha L_rob`, where `L_rob` uses a PGD adversary per example.
pub fn train_reduced(data: &ReducedData, cfg: &BenchConfig, alpha: f64, seed: u64) -> Result<TrainRun> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if data.train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let steps = cfg.effective_steps();
    let mut model = ReducedModel::init(seed, cfg.init_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bad_5eed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut rows = Vec::new();
    let mut diverged = false;
    let log = |step: usize, model: &ReducedModel, rows: &mut Vec<MetricRow>| {
        let e = pgd_evaluate(model, data, &data.test, cfg.eval_eps, cfg.eval_step, cfg.eval_steps);
        rows.push(MetricRow {
            step,
            mode: mode_name(alpha).to_string(),
            alpha,
            clean_acc: e.clean_acc,
            robust_acc: e.robust_acc,
            clean_loss: e.clean_loss,
        });
        e.clean_loss.is_finite()
    };
    log(0, &model, &mut rows);
    for step in 1..=steps {
        let mut grad = vec![0.0; PARAMS];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let k = order[cursor];
            cursor += 1;
            let (x, y) = (&data.train.images[k], data.train.labels[k]);
            if alpha < 1.0 {
                let (l, g, _) = model.loss_grad(&data.projection, x, y, true);
                batch_loss += (1.0 - alpha) * l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += (1.0 - alpha) * b);
            }
            if alpha > 0.0 {
                let (xa, _) =
                    pgd_attack(&model, &data.projection, x, y, cfg.train_eps, cfg.train_attack_step, cfg.train_attack_steps);
                let (l, g, _) = model.loss_grad(&data.projection, &xa, y, true);
                batch_loss += alpha * l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += alpha * b);
            }
        }
        let scale = cfg.lr / cfg.batch as f64;
        let (g1, g2) = grad.split_at(HIDDEN * FEATURES);
        model.w1.iter_mut().zip(g1).for_each(|(w, g)| *w -= scale * g);
        model.w2.iter_mut().zip(g2).for_each(|(w, g)| *w -= scale * g);
        if !batch_loss.is_finite() || !model.is_finite() {
            diverged = true;
            break;
        }
        if step % cfg.log_every.max(1) == 0 || step == steps {
            if !log(step, &model, &mut rows) {
                diverged = true;
                break;
            }
        }
    }
    Ok(TrainRun { alpha, seed, rows, diverged, model })
}

/// One run per `alpha`, in parallel, each with private state.
pub fn train_modes(data: &ReducedData, cfg: &BenchConfig, seed: u64) -> Result<Vec<TrainRun>> {
    par::map_slice(&cfg.alphas, |&a| train_reduced(data, cfg, a, seed)).into_iter().collect()
}

pub fn write_metrics_csv<W: Write>(w: W, runs: &[TrainRun]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "mode", "alpha", "clean_acc", "robust_acc", "clean_loss"]).map_err(csv_err)?;
    for r in runs.iter().flat_map(|r| &r.rows) {
        wr.write_record([
            r.step.to_string(),
            r.mode.clone(),
            r.alpha.to_string(),
            format!("{:.6}", r.clean_acc),
            format!("{:.6}", r.robust_acc),
            format!("{:.9e}", r.clean_loss),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// `var(last 20%) / var(first 80%)` of a logged series; plateaued when below 0.1.
/// NaN when fewer than five values are logged.
pub fn plateau_ratio(series: &[f64]) -> f64 {
    if series.len() < 5 {
        return f64::NAN;
    }
    let cut = series.len() - series.len().div_ceil(5);
    let (head, tail) = series.split_at(cut);
    let vh = variance(head);
    if vh == 0.0 {
        return if variance(tail) == 0.0 { 0.0 } else { f64::INFINITY };
    }
    variance(tail) / vh
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub alpha: f64,
    pub mode: String,
    pub final_clean_acc: f64,
    pub final_robust_acc: f64,
    pub robust_le_clean_everywhere: bool,
    pub plateau_clean: f64,
    pub plateau_robust: f64,
    pub diverged: bool,
}

pub fn summarize(run: &TrainRun) -> RunSummary {
    let last = run.rows.last().expect("at least the initial row");
    let clean: Vec<f64> = run.rows.iter().map(|r| r.clean_acc).collect();
    let robust: Vec<f64> = run.rows.iter().map(|r| r.robust_acc).collect();
    RunSummary {
        alpha: run.alpha,
        mode: mode_name(run.alpha).to_string(),
        final_clean_acc: last.clean_acc,
        final_robust_acc: last.robust_acc,
        robust_le_clean_everywhere: run.rows.iter().all(|r| r.robust_acc <= r.clean_acc),
        plateau_clean: plateau_ratio(&clean),
        plateau_robust: plateau_ratio(&robust),
        diverged: run.diverged,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub data: DataMeta,
    pub config: BenchConfig,
    pub steps: usize,
    pub loss: String,
    pub optimizer: String,
    pub attack: String,
    pub robust_rule: String,
    pub plateau_rule: String,
    pub param_count: usize,
    pub summaries: Vec<RunSummary>,
}

pub fn bench_metadata(data: &ReducedData, cfg: &BenchConfig, runs: &[TrainRun]) -> BenchMetadata {
    BenchMetadata {
        data: data.meta.clone(),
        config: cfg.clone(),
        steps: cfg.effective_steps(),
        loss: "softmax cross-entropy".into(),
        optimizer: format!("plain SGD, lr {}, batch {}", cfg.lr, cfg.batch),
        attack: "L-inf PGD on pixels from delta = 0, sign steps, clamp to the ball and to [0, 1]".into(),
        robust_rule: "robust iff no PGD iterate (clean input included) is misclassified".into(),
        plateau_rule: "var(last 20% of logged values) / var(first 80%) < 0.1".into(),
        param_count: PARAMS,
        summaries: runs.iter().map(summarize).collect(),
    }
}

/// Distances between exact iteration, polynomial-model iteration and the lifted solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionReport {
    pub t_len: usize,
    pub n: usize,
    pub rho: f64,
    pub gamma_n: f64,
    pub l_lift: f64,
    pub eps_base_step: f64,
    /// `max_t ||v_exact(t) - v_poly(t)||`.
    pub exact_vs_poly: f64,
    /// `(2 Gamma_N + L_lift eps_base,step) / (1 - rho)`.
    pub exact_vs_poly_bound: f64,
    /// `max_t ||y_1(t) - v_poly(t)||` for the solved trajectory.
    pub solve_vs_poly: f64,
    /// `Gamma_N / (1 - rho)` plus the solver error `kappa * res * ||Y||`.
    pub solve_vs_poly_bound: f64,
    pub solve_vs_exact: f64,
    /// `(Gamma_N + L_lift eps_base,step) / (1 - rho)` plus the solver error.
    pub solve_vs_exact_bound: f64,
    pub stacked_solve_vs_poly: f64,
    pub stacked_truncation_bound: f64,
    pub all_within: bool,
}

/// Run all three paths on a task config at cutoff `n`.
pub fn compare_reduction(cfg: &RunConfig, n: usize) -> Result<ReductionReport> {
    let prep = prepare_task(cfg)?;
    let (vbar_measured, vbar_used) = trajectory_radius(&prep, cfg.lift.vbar);
    let asm = build_system(&prep, n, vbar_used, vbar_measured, cfg.lift.dim_cap)?;
    let h = &asm.horizon;
    let rho = asm.lifted.rho();
    let cond = crate::horizon::condition_bounds(rho, h.t_len, None);
    let kappa = cond.closed_form_bound.min(cond.neumann_bound);
    let (y_fwd, _) = solve_forward(h);
    let sol = solve_linear_system(h, 1e-12)?;
    let solver_err = kappa * sol.residual * norm2(&y_fwd);
    let (exact, poly) = (prep.exact_flat(), prep.poly_flat());
    let d = prep.task.d();
    let level1 = |t: usize| &sol.y[t * h.delta_n..t * h.delta_n + d];
    let max_over = |f: &dyn Fn(usize) -> f64| (0..=h.t_len).map(f).fold(0.0, f64::max);
    let exact_vs_poly = max_over(&|t| dist2(&exact[t], &poly[t]));
    let solve_vs_poly = max_over(&|t| dist2(level1(t), &poly[t]));
    let solve_vs_exact = max_over(&|t| dist2(level1(t), &exact[t]));
    let stacked_solve_vs_poly = dist2(&sol.y, &stacked_lift(&poly, n));
    let eps_base_step = crate::dynamics::base_step_error_bound(
        prep.eps_nl_step(),
        prep.base_step().eta_u,
        prep.base_step().l_u_delta,
        prep.base_step().eps_u_grad,
    );
    let (g, l) = (asm.lifted.gamma_n, asm.lifted.l_lift);
    let inv = if rho < 1.0 { 1.0 / (1.0 - rho) } else { f64::INFINITY };
    let exact_vs_poly_bound = (2.0 * g + l * eps_base_step) * inv;
    let solve_vs_poly_bound = g * inv + solver_err;
    let solve_vs_exact_bound = (g + l * eps_base_step) * inv + solver_err;
    let stacked_truncation_bound = ((h.t_len + 1) as f64).sqrt() * g * inv + solver_err;
    let all_within = exact_vs_poly <= exact_vs_poly_bound
        && solve_vs_poly <= solve_vs_poly_bound
        && solve_vs_exact <= solve_vs_exact_bound
        && stacked_solve_vs_poly <= stacked_truncation_bound;
    Ok(ReductionReport {
        t_len: h.t_len,
        n,
        rho,
        gamma_n: g,
        l_lift: l,
        eps_base_step,
        exact_vs_poly,
        exact_vs_poly_bound,
        solve_vs_poly,
        solve_vs_poly_bound,
        solve_vs_exact,
        solve_vs_exact_bound,
        stacked_solve_vs_poly,
        stacked_truncation_bound,
        all_within,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_is_sixty() {
        assert_eq!(PARAMS, 60);
        assert_eq!(ReducedModel::init(1, 1.0).param_count(), 60);
    }

    #[test]
    fn resize_preserves_constant_and_mean() {
        let img = vec![0.7; 28 * 28];
        assert!(resize(&img, 28, 28, 12, 12).iter().all(|v| (v - 0.7).abs() < 1e-12));
        let ramp: Vec<f64> = (0..28 * 28).map(|k| (k % 28) as f64).collect();
        let out = resize(&ramp, 28, 28, 12, 12);
        let (mi, mo) = (ramp.iter().sum::<f64>() / 784.0, out.iter().sum::<f64>() / 144.0);
        assert!((mi - mo).abs() < 1e-10);
    }

    #[test]
    fn idx_round_trip() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([1u8, 2, 3, 4]);
        let p = parse_idx_images(&img).unwrap();
        assert_eq!((p.count, p.rows, p.cols), (1, 2, 2));
        assert!(parse_idx_labels(&img).is_err());
        assert_eq!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 3, 4]).unwrap(), vec![3, 4]);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let proj = random_projection(3);
        let model = ReducedModel::init(4, 1.0);
        let x: Vec<f64> = (0..PIXELS).map(|k| (k as f64 * 0.37).sin().abs()).collect();
        let (l0, gw, gx) = model.loss_grad(&proj, &x, 2, true);
        let h = 1e-6;
        for p in [0, 17, 143] {
            let mut xp = x.clone();
            xp[p] += h;
            let fd = (model.loss_grad(&proj, &xp, 2, false).0 - l0) / h;
            assert!((fd - gx[p]).abs() < 1e-4, "pixel {p}: {fd} vs {}", gx[p]);
        }
        for k in [0, 39, 40, 59] {
            let mut m2 = model.clone();
            if k < 40 { m2.w1[k] += h } else { m2.w2[k - 40] += h }
            let fd = (m2.loss_grad(&proj, &x, 2, false).0 - l0) / h;
            assert!((fd - gw[k]).abs() < 1e-4, "param {k}: {fd} vs {}", gw[k]);
        }
    }
}
