//! Command-line front end: flat key=value config files, the binary
//! checkpoint format, and the synth / train / infer / eval / bench
//! commands. Exit codes: 0 ok, 1 other failure, 2 config error,
//! 3 training divergence, 4 checkpoint error, 5 I/O error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::backbone::{build, Activation, BackboneSpec, Model, ModelKind, ModelWeights};
use crate::inference::{
    enhance, psnr, ssim, InferenceConfig, InferenceMode, MetricRegistry,
};
use crate::ndtensor::{Scalar, Tensor};
use crate::pipeline::{
    train_stage1, train_stage2, PipelineConfig, Scale, TrainConfig, TrainTrace,
};
use crate::synthdata::{gen_one_to_many, read_manifest, read_ppm, save_dataset, write_ppm};
use crate::variational::{AdaptivePrior, VariationalParams};
use crate::{Error, Result};

// ---------------------------------------------------------------------
// Config file.
// ---------------------------------------------------------------------

/// Every tunable in one flat config; parsed from key=value lines with
/// '#' comments. Unknown keys are rejected and all values are validated
/// before any command does work.
#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    // synth
    pub count: usize,
    pub size: usize,
    pub targets: usize,
    pub spread: f64,
    // pipeline
    pub r: Scale,
    pub alpha: f64,
    pub lp_keep_fraction: Option<f64>,
    // train
    pub batch_size: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub kl_weight: Option<f64>,
    pub n_mc: usize,
    pub crop_size: Option<usize>,
    pub ema_beta: f64,
    // backbone
    pub channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    // inference
    pub k: usize,
    pub mode: InferenceMode,
    pub iqa: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            out_dir: PathBuf::from("out"),
            manifest: PathBuf::from("out/data/manifest.jsonl"),
            count: 8,
            size: 32,
            targets: 2,
            spread: 0.3,
            r: Scale::new(1, 4).expect("static"),
            alpha: 0.025,
            lp_keep_fraction: None,
            batch_size: 8,
            iters_stage1: 500,
            iters_stage2: 300,
            lr_init: 2e-4,
            lr_final: 1e-6,
            kl_weight: None,
            n_mc: 1,
            crop_size: None,
            ema_beta: 0.999,
            channels: 3,
            base_channels: 8,
            levels: 2,
            blocks_per_level: 1,
            k: 25,
            mode: InferenceMode::MonteCarlo,
            iqa: "builtin".into(),
        }
    }
}

fn parse_scale(v: &str) -> Result<Scale> {
    if let Some((n, d)) = v.split_once('/') {
        let num: u32 = n
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad scale numerator '{n}'")))?;
        let den: u32 = d
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad scale denominator '{d}'")))?;
        Scale::new(num, den)
    } else {
        // Decimal form: accept only exact small rationals like 0.25.
        let f: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("bad scale '{v}'")))?;
        for den in 1..=4096u32 {
            let num = f * den as f64;
            if (num - num.round()).abs() < 1e-12 && num.round() >= 1.0 {
                return Scale::new(num.round() as u32, den);
            }
        }
        Err(Error::Config(format!("scale '{v}' is not a small rational")))
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
}

impl Config {
    /// Parse key=value text over the defaults, rejecting unknown keys.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "line {}: expected key=value, got '{line}'",
                lineno + 1
            )))?;
            let (key, val) = (key.trim(), val.trim());
            match key {
                "seed" => cfg.seed = parse_val(key, val)?,
                "out_dir" => cfg.out_dir = PathBuf::from(val),
                "manifest" => cfg.manifest = PathBuf::from(val),
                "count" => cfg.count = parse_val(key, val)?,
                "size" => cfg.size = parse_val(key, val)?,
                "targets" => cfg.targets = parse_val(key, val)?,
                "spread" => cfg.spread = parse_val(key, val)?,
                "r" => cfg.r = parse_scale(val)?,
                "alpha" => cfg.alpha = parse_val(key, val)?,
                "lp_keep_fraction" => cfg.lp_keep_fraction = Some(parse_val(key, val)?),
                "batch_size" => cfg.batch_size = parse_val(key, val)?,
                "iters_stage1" => cfg.iters_stage1 = parse_val(key, val)?,
                "iters_stage2" => cfg.iters_stage2 = parse_val(key, val)?,
                "lr_init" => cfg.lr_init = parse_val(key, val)?,
                "lr_final" => cfg.lr_final = parse_val(key, val)?,
                "kl_weight" => cfg.kl_weight = Some(parse_val(key, val)?),
                "n_mc" => cfg.n_mc = parse_val(key, val)?,
                "crop_size" => cfg.crop_size = Some(parse_val(key, val)?),
                "ema_beta" => cfg.ema_beta = parse_val(key, val)?,
                "channels" => cfg.channels = parse_val(key, val)?,
                "base_channels" => cfg.base_channels = parse_val(key, val)?,
                "levels" => cfg.levels = parse_val(key, val)?,
                "blocks_per_level" => cfg.blocks_per_level = parse_val(key, val)?,
                "k" => cfg.k = parse_val(key, val)?,
                "mode" => {
                    cfg.mode = match val {
                        "mc" => InferenceMode::MonteCarlo,
                        "rank" => InferenceMode::Rank,
                        other => {
                            return Err(Error::Config(format!(
                                "mode must be 'mc' or 'rank', got '{other}'"
                            )))
                        }
                    }
                }
                "iqa" => cfg.iqa = val.to_string(),
                unknown => {
                    return Err(Error::Config(format!(
                        "unknown config key '{unknown}' (line {})",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline()?.validate()?;
        self.train(1)?.validate()?;
        if self.channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::Config("ema_beta must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            r: self.r,
            alpha: self.alpha,
            lp_keep_fraction: self.lp_keep_fraction.unwrap_or(self.r.value()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self, stage: u8) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            iters: if stage == 1 { self.iters_stage1 } else { self.iters_stage2 },
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            kl_weight: self.kl_weight,
            n_mc: self.n_mc,
            seed: self.seed,
            crop_size: self.crop_size,
            grad_clip: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone(&self, stage: u8) -> BackboneSpec {
        BackboneSpec {
            in_channels: if stage == 1 { self.channels } else { 2 * self.channels },
            out_channels: self.channels,
            base_channels: self.base_channels,
            levels: self.levels,
            blocks_per_level: self.blocks_per_level,
            activation: Activation::Silu,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            k: self.k,
            mode: self.mode,
            iqa_id: Some(self.iqa.clone()),
            seed: self.seed,
        }
    }
}

// ---------------------------------------------------------------------
// Checkpoint format: "BEMC" | version u32 LE | stage u8 | backbone spec |
// named tensor table | prior block (stage 1) | CRC32 of all prior bytes.
// ---------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"BEMC";
const CKPT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    buf.push(T::DTYPE);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for &v in t.data().iter() {
        if T::DTYPE == 0 {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn put_named_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_tensor(buf, t);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let dtype = self.u8()?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype code {dtype} does not match requested precision {}",
                T::DTYPE
            )));
        }
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            if T::DTYPE == 0 {
                let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
                data.push(T::of_f64(v as f64));
            } else {
                data.push(T::of_f64(self.f64()?));
            }
        }
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn named_tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        Ok((name, self.tensor()?))
    }
}

/// A loaded or about-to-be-saved checkpoint.
pub struct Checkpoint<T> {
    pub stage: u8,
    pub model: Model<T>,
    pub prior: Option<AdaptivePrior<T>>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    buf.push(ckpt.stage);
    let spec = &ckpt.model.spec;
    for v in [
        spec.in_channels,
        spec.out_channels,
        spec.base_channels,
        spec.levels,
        spec.blocks_per_level,
    ] {
        put_u32(&mut buf, v as u32);
    }
    buf.push(match spec.activation {
        Activation::Silu => 0,
    });

    match &ckpt.model.weights {
        ModelWeights::Deterministic(ws) => {
            put_u32(&mut buf, ws.len() as u32);
            for (name, t) in ws {
                put_named_tensor(&mut buf, name, t);
            }
        }
        ModelWeights::Bayesian(module) => {
            put_u32(&mut buf, 2 * module.params.len() as u32);
            for (name, p) in &module.params {
                put_named_tensor(&mut buf, &format!("{name}.mu"), &p.mu);
                put_named_tensor(&mut buf, &format!("{name}.rho"), &p.rho);
            }
        }
    }

    match &ckpt.prior {
        Some(prior) => {
            buf.push(1);
            put_u32(&mut buf, prior.mu_ema.len() as u32);
            for (mu, sigma) in prior.mu_ema.iter().zip(&prior.sigma_ema) {
                put_tensor(&mut buf, mu);
                put_tensor(&mut buf, sigma);
            }
            buf.extend_from_slice(&prior.beta.as_f64().to_le_bytes());
            buf.extend_from_slice(&prior.step.to_le_bytes());
        }
        None => buf.push(0),
    }

    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    if bytes.len() < 9 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint(format!(
            "{}: CRC mismatch, file is corrupt",
            path.display()
        )));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let stage = r.u8()?;
    if stage != 1 && stage != 2 {
        return Err(Error::Checkpoint(format!("invalid stage tag {stage}")));
    }
    let spec = BackboneSpec {
        in_channels: r.u32()? as usize,
        out_channels: r.u32()? as usize,
        base_channels: r.u32()? as usize,
        levels: r.u32()? as usize,
        blocks_per_level: r.u32()? as usize,
        activation: match r.u8()? {
            0 => Activation::Silu,
            other => {
                return Err(Error::Checkpoint(format!("unknown activation code {other}")))
            }
        },
    };

    let kind = if stage == 1 { ModelKind::Bayesian } else { ModelKind::Deterministic };
    let mut model = build::<T>(&spec, kind, 0);
    let n_tensors = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        table.push(r.named_tensor::<T>()?);
    }
    let lookup = |name: &str| -> Result<Tensor<T>> {
        table
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    };
    match &mut model.weights {
        ModelWeights::Deterministic(ws) => {
            for (name, t) in ws.iter_mut() {
                let loaded = lookup(name)?;
                if loaded.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for '{name}'")));
                }
                *t = loaded;
            }
        }
        ModelWeights::Bayesian(module) => {
            for (name, p) in module.params.iter_mut() {
                let mu = lookup(&format!("{name}.mu"))?;
                let rho = lookup(&format!("{name}.rho"))?;
                if mu.shape() != p.mu.shape() || rho.shape() != p.rho.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for '{name}'")));
                }
                *p = VariationalParams::new(mu, rho)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
    }

    let prior = if r.u8()? == 1 {
        let n = r.u32()? as usize;
        let mut mu_ema = Vec::with_capacity(n);
        let mut sigma_ema = Vec::with_capacity(n);
        for _ in 0..n {
            mu_ema.push(r.tensor::<T>()?);
            sigma_ema.push(r.tensor::<T>()?);
        }
        let beta = T::of_f64(r.f64()?);
        let step = r.u64()?;
        Some(AdaptivePrior {
            mu_ema,
            sigma_ema,
            beta,
            step,
        })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
    }
    Ok(Checkpoint {
        stage,
        model,
        prior,
    })
}

// ---------------------------------------------------------------------
// Commands. The default working precision is f32.
// ---------------------------------------------------------------------

fn write_trace_csv(path: &Path, trace: &TrainTrace) -> Result<()> {
    let mut out = String::from("step,data,kl,lr\n");
    for s in &trace.steps {
        out.push_str(&format!("{},{},{},{}\n", s.step, s.data_term, s.kl_term, s.lr));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cmd_synth(cfg: &Config) -> Result<PathBuf> {
    let samples =
        gen_one_to_many::<f32>(cfg.seed, cfg.count, cfg.size, cfg.targets, cfg.spread)?;
    let dir = cfg.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = save_dataset(&dir, &samples)?;
    println!("{}", manifest.display());
    Ok(manifest)
}

pub fn cmd_train(cfg: &Config, stage: u8) -> Result<PathBuf> {
    if stage != 1 && stage != 2 {
        return Err(Error::Config(format!("stage must be 1 or 2, got {stage}")));
    }
    let dataset = crate::synthdata::load_dataset::<f32>(&cfg.manifest)?;
    let tcfg = cfg.train(stage)?;
    let pcfg = cfg.pipeline()?;
    fs::create_dir_all(&cfg.out_dir)?;

    let (ckpt, trace) = if stage == 1 {
        let mut f = build::<f32>(&cfg.backbone(1), ModelKind::Bayesian, cfg.seed);
        let mut prior =
            AdaptivePrior::from_posterior(f.bayes_module().unwrap(), cfg.ema_beta as f32);
        let trace = train_stage1(&dataset, &mut f, &mut prior, &tcfg, &pcfg)?;
        (
            Checkpoint {
                stage,
                model: f,
                prior: Some(prior),
            },
            trace,
        )
    } else {
        let mut g = build::<f32>(&cfg.backbone(2), ModelKind::Deterministic, cfg.seed);
        let trace = train_stage2(&dataset, &mut g, &tcfg, &pcfg)?;
        (
            Checkpoint {
                stage,
                model: g,
                prior: None,
            },
            trace,
        )
    };
    write_trace_csv(&cfg.out_dir.join(format!("train_stage{stage}.csv")), &trace)?;
    let path = cfg.out_dir.join(format!("stage{stage}.ckpt"));
    save_checkpoint(&path, &ckpt)?;
    println!("{}", path.display());
    Ok(path)
}

fn clamp01<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

pub struct InferArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub mode: Option<InferenceMode>,
    pub k: Option<usize>,
    pub dump_candidates: Option<PathBuf>,
}

pub fn cmd_infer(cfg: &Config, args: &InferArgs) -> Result<()> {
    let f_ckpt = load_checkpoint::<f32>(&cfg.out_dir.join("stage1.ckpt"))?;
    let g_ckpt = load_checkpoint::<f32>(&cfg.out_dir.join("stage2.ckpt"))?;
    if f_ckpt.stage != 1 || g_ckpt.stage != 2 {
        return Err(Error::Checkpoint("checkpoint stage tags do not match roles".into()));
    }
    let pcfg = cfg.pipeline()?;
    let mut icfg = cfg.inference();
    if let Some(m) = args.mode {
        icfg.mode = m;
    }
    if let Some(k) = args.k {
        icfg.k = k;
    }
    icfg.validate()?;

    let x = read_ppm::<f32>(&args.input)?;
    let registry = MetricRegistry::default();
    let out = enhance(&x, &f_ckpt.model, &g_ckpt.model, &pcfg, &icfg, &registry)?;
    if let Some(parent) = args.output.parent() {
        fs::create_dir_all(parent)?;
    }
    write_ppm(&args.output, &clamp01(&out.y_hat))?;

    if let Some(dir) = &args.dump_candidates {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("k,score,selected\n");
        let selected = out
            .candidates
            .scores
            .as_ref()
            .map(|s| {
                let mut best = 0;
                for (i, &v) in s.iter().enumerate() {
                    if v > s[best] {
                        best = i;
                    }
                }
                best
            })
            .unwrap_or(usize::MAX);
        for (k, z) in out.candidates.z_list.iter().enumerate() {
            write_ppm(&dir.join(format!("z_{k:03}.ppm")), &clamp01(z))?;
            let score = out
                .candidates
                .scores
                .as_ref()
                .map(|s| s[k].to_string())
                .unwrap_or_default();
            csv.push_str(&format!("{k},{score},{}\n", (k == selected) as u8));
        }
        fs::write(dir.join("scores.csv"), csv)?;
    }
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Per-sample metrics against every reference target plus the
/// best-over-targets view.
pub fn cmd_eval(cfg: &Config, pred_dir: &Path, ref_manifest: &Path) -> Result<PathBuf> {
    let records = read_manifest(ref_manifest)?;
    if records.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} lists no samples",
            ref_manifest.display()
        )));
    }
    let ref_dir = ref_manifest.parent().unwrap_or(Path::new("."));
    let mut csv = String::from("scene_id,target,psnr,ssim\n");
    let mut missing = Vec::new();
    let (mut sum_psnr, mut sum_ssim, mut n) = (0.0f64, 0.0f64, 0usize);
    for rec in &records {
        let pred_path = pred_dir.join(format!("pred_{:06}.ppm", rec.scene_id));
        if !pred_path.exists() {
            missing.push(pred_path.display().to_string());
            continue;
        }
        let pred = read_ppm::<f32>(&pred_path)?;
        let mut best: Option<(f64, f64)> = None;
        for (t, y_path) in rec.target_paths.iter().enumerate() {
            let y = read_ppm::<f32>(&ref_dir.join(y_path))?;
            let p = psnr(&pred, &y, 1.0)?;
            let s = ssim(&pred, &y, 1.0)?;
            csv.push_str(&format!("{},{t},{},{s:.6}\n", rec.scene_id, fmt_db(p)));
            if best.map(|(bp, _)| p > bp).unwrap_or(true) {
                best = Some((p, s));
            }
        }
        let (bp, bs) = best.expect("manifest targets non-empty");
        csv.push_str(&format!("{},best,{},{bs:.6}\n", rec.scene_id, fmt_db(bp)));
        if bp.is_finite() {
            sum_psnr += bp;
        }
        sum_ssim += bs;
        n += 1;
    }
    if !missing.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing predictions: {}", missing.join(", ")),
        )));
    }
    csv.push_str(&format!(
        "mean,best,{:.6},{:.6}\n",
        sum_psnr / n as f64,
        sum_ssim / n as f64
    ));
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("metrics.csv");
    fs::write(&path, &csv)?;
    print!("{csv}");
    Ok(path)
}

/// Benchmark rows: the two-stage pipeline with K candidates, a naive
/// full-resolution Bayesian network producing K outputs through both
/// stages, and a single deterministic pass.
pub struct BenchReport {
    pub two_stage_s: f64,
    pub naive_s: f64,
    pub single_det_s: f64,
}

pub fn cmd_bench(cfg: &Config, k: usize, size: usize) -> Result<BenchReport> {
    let pcfg = cfg.pipeline()?;
    let f = build::<f32>(&cfg.backbone(1), ModelKind::Bayesian, cfg.seed);
    let g = build::<f32>(&cfg.backbone(2), ModelKind::Deterministic, cfg.seed + 1);
    let x = Tensor::<f32>::from_fn(&[cfg.channels, size, size], |i| {
        ((i * 2654435761) % 997) as f32 / 997.0
    });
    let icfg = InferenceConfig {
        k,
        mode: InferenceMode::MonteCarlo,
        iqa_id: None,
        seed: cfg.seed,
    };
    let registry = MetricRegistry::default();

    let t0 = Instant::now();
    enhance(&x, &f, &g, &pcfg, &icfg, &registry)?;
    let two_stage_s = t0.elapsed().as_secs_f64();

    // Naive baseline: a full-resolution Bayesian model of the same
    // architecture runs end to end K times, refining each candidate.
    let mut eps = crate::variational::EpsilonSource::with_label(cfg.seed, "bench-naive");
    let t1 = Instant::now();
    for _ in 0..k {
        let z = f.forward(&x, Some(&mut eps))?;
        crate::pipeline::stage2_forward(&x, &z, &g)?;
    }
    let naive_s = t1.elapsed().as_secs_f64();

    let z_up = Tensor::<f32>::full(&[cfg.channels, size, size], 1.0);
    let t2 = Instant::now();
    crate::pipeline::stage2_forward(&x, &z_up, &g)?;
    let single_det_s = t2.elapsed().as_secs_f64();

    let report = BenchReport {
        two_stage_s,
        naive_s,
        single_det_s,
    };
    println!("variant,seconds");
    println!("two_stage_k{k},{two_stage_s:.6}");
    println!("naive_full_bnn_k{k},{naive_s:.6}");
    println!("single_deterministic,{single_det_s:.6}");
    Ok(report)
}

// ---------------------------------------------------------------------
// Argument parsing and the process entry point.
// ---------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "bem", about = "Two-stage Bayesian low-light image enhancement")]
pub struct Cli {
    /// Path to a key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic one-to-many dataset and its manifest.
    Synth,
    /// Train one stage and write a checkpoint plus a per-step loss CSV.
    Train {
        #[arg(long)]
        stage: u8,
    },
    /// Enhance one image using both trained stages.
    Infer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// mc | rank
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Worker threads for candidate sampling (1 = reproducible).
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        dump_candidates: Option<PathBuf>,
    },
    /// Score predictions against the reference manifest (PSNR/SSIM).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Time the pipeline against naive and deterministic baselines.
    Bench {
        #[arg(long, default_value_t = 25)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Domain(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Io(_) => 5,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Synth => {
            cmd_synth(&cfg)?;
        }
        Command::Train { stage } => {
            cmd_train(&cfg, stage)?;
        }
        Command::Infer {
            input,
            output,
            mode,
            k,
            threads,
            dump_candidates,
        } => {
            if threads == 0 {
                return Err(Error::Config("threads must be >= 1".into()));
            }
            let mode = match mode.as_deref() {
                None => None,
                Some("mc") => Some(InferenceMode::MonteCarlo),
                Some("rank") => Some(InferenceMode::Rank),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "mode must be 'mc' or 'rank', got '{other}'"
                    )))
                }
            };
            cmd_infer(
                &cfg,
                &InferArgs {
                    input,
                    output,
                    mode,
                    k,
                    dump_candidates,
                },
            )?;
        }
        Command::Eval { pred, reference } => {
            cmd_eval(&cfg, &pred, &reference)?;
        }
        Command::Bench { k, size } => {
            cmd_bench(&cfg, k, size)?;
        }
    }
    Ok(())
}

/// Process entry point used by the binary: parse, run, map errors to the
/// documented exit codes.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn config_parses_defaults_comments_and_rejects_unknown_keys() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.k, 25);
        assert_eq!(cfg.alpha, 0.025);

        let cfg = Config::parse(
            "# comment\nseed = 7\nr = 1/8 # trailing comment\nmode=rank\nalpha=0.05\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.r, Scale::new(1, 8).unwrap());
        assert_eq!(cfg.mode, InferenceMode::Rank);
        assert_eq!(cfg.alpha, 0.05);

        match Config::parse("sead = 7\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("sead")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(Config::parse("alpha = -1\n").is_err());
        assert!(Config::parse("mode = fastest\n").is_err());
    }

    #[test]
    fn scale_parsing_accepts_fractions_and_decimals() {
        assert_eq!(parse_scale("1/16").unwrap(), Scale::new(1, 16).unwrap());
        assert_eq!(parse_scale("0.25").unwrap(), Scale::new(1, 4).unwrap());
        assert!(parse_scale("0").is_err());
        assert!(parse_scale("2").is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::new(3, 3)
        };
        let model = build::<f32>(&spec, ModelKind::Bayesian, 5);
        let prior = AdaptivePrior::from_posterior(model.bayes_module().unwrap(), 0.999);
        let ckpt = Checkpoint {
            stage: 1,
            model,
            prior: Some(prior),
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        assert_eq!(loaded.stage, 1);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        // Loaded weights match the originals.
        let a = ckpt.model.bayes_module().unwrap();
        let b = loaded.model.bayes_module().unwrap();
        for ((na, pa), (nb, pb)) in a.params.iter().zip(&b.params) {
            assert_eq!(na, nb);
            assert_eq!(pa.mu, pb.mu);
            assert_eq!(pa.rho, pb.rho);
        }
        let prior = loaded.prior.unwrap();
        assert_eq!(prior.beta, 0.999);
        assert_eq!(prior.mu_ema.len(), a.params.len());
    }

    #[test]
    fn checkpoint_detects_corruption_and_wrong_magic() {
        let dir = tempdir().unwrap();
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::new(6, 3)
        };
        let ckpt = Checkpoint {
            stage: 2,
            model: build::<f32>(&spec, ModelKind::Deterministic, 1),
            prior: None,
        };
        let p = dir.path().join("g.ckpt");
        save_checkpoint(&p, &ckpt).unwrap();

        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        match load_checkpoint::<f32>(&p) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("CRC")),
            Err(other) => panic!("expected CRC failure, got {other:?}"),
            Ok(_) => panic!("corrupt checkpoint loaded successfully"),
        }

        fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_rejects_wrong_precision() {
        let dir = tempdir().unwrap();
        let spec = BackboneSpec {
            base_channels: 4,
            ..BackboneSpec::new(6, 3)
        };
        let ckpt = Checkpoint {
            stage: 2,
            model: build::<f32>(&spec, ModelKind::Deterministic, 1),
            prior: None,
        };
        let p = dir.path().join("g.ckpt");
        save_checkpoint(&p, &ckpt).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn exit_codes_follow_the_documented_table() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Divergence { step: 3 }), 3);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 4);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "x"
            ))),
            5
        );
    }

    #[test]
    fn synth_writes_deterministic_dataset() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let mk = |dir: &Path| Config {
            count: 2,
            size: 16,
            manifest: dir.join("data/manifest.jsonl"),
            out_dir: dir.to_path_buf(),
            ..Config::default()
        };
        let m1 = cmd_synth(&mk(d1.path())).unwrap();
        let m2 = cmd_synth(&mk(d2.path())).unwrap();
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        let rec = read_manifest(&m1).unwrap();
        assert_eq!(rec.len(), 2);
        let f1 = fs::read(m1.parent().unwrap().join(&rec[0].x_path)).unwrap();
        let f2 = fs::read(m2.parent().unwrap().join(&rec[0].x_path)).unwrap();
        assert_eq!(f1, f2);

        // count = 0: empty manifest, still success.
        let d3 = tempdir().unwrap();
        let m3 = cmd_synth(&Config {
            count: 0,
            manifest: d3.path().join("data/manifest.jsonl"),
            ..Config::default()
        })
        .unwrap();
        assert!(read_manifest(&m3).unwrap().is_empty());
    }
}
