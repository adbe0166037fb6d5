//! The `restr` command line: `restr <command> [--key value]...`.
//!
//! Every run-config key is accepted as a flag by the commands that build a
//! model, overriding the `--config` file, which in turn overrides the desk
//! defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::checks::{check_model, check_ops, tiny_model_config};
use crate::config::{FusionVariant, ModelConfig, RunConfig};
use crate::data::{generate, Dataset, Sample};
use crate::error::{Error, Result};
use crate::fusion::{measured_macs, profile, profile_csv};
use crate::metrics::{binarize, evaluate, Buckets};
use crate::model::Model;
use crate::render;
use crate::tensor::Fault;
use crate::train::{log_csv, LogRow, Trainer};

pub const USAGE: &str = "\
usage: restr <command> [--key value]...

commands:
  gen        --out DIR [--seed N] [--count N] [--size N]
  train      --data DIR [--out DIR] [--config FILE] [--resume CKPT] [--until N] [KEY overrides]
  eval       --ckpt FILE --data DIR [--buckets SPEC] [--out DIR]
  gradcheck  [--scope ops|model] [--inject-fault gelu|matmul] [--seeds N] [--count N]
  ablate     --what variant|layers|lambda|tau --data DIR [--out FILE] [--config FILE] [KEY overrides]
  profile    [--config FILE] [--geometry desk|reference] [--measure true] [--out FILE] [KEY overrides]
  render     --ckpt FILE --data DIR --ids LIST [--out DIR]

KEY overrides are any run-config key, e.g. --base_lr 1e-3 --fusion_variant VME.
RESTR_THREADS caps the worker count.
";

/// Parsed flags of one invocation.
#[derive(Debug, Default)]
pub struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    pub fn parse(args: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut it = args.iter().peekable();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .filter(|k| !k.is_empty())
                .ok_or_else(|| Error::Config(format!("expected a --flag, got {arg:?}")))?;
            let value = match it.peek() {
                Some(v) if !v.starts_with("--") => it.next().unwrap().clone(),
                _ => "true".to_string(),
            };
            if values.insert(key.to_string(), value).is_some() {
                return Err(Error::Config(format!("--{key} given twice")));
            }
        }
        Ok(Flags { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required --{key}")))
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("invalid value {v:?} for --{key}"))),
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            None | Some("false") => Ok(false),
            Some("true") => Ok(true),
            Some(v) => Err(Error::Config(format!("invalid value {v:?} for --{key}"))),
        }
    }

    /// Rejects flags outside `allowed` (and outside the config keys when
    /// `config_keys` is set).
    fn check(&self, allowed: &[&str], config_keys: bool) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) && !(config_keys && RunConfig::is_key(key)) {
                return Err(Error::Config(format!("unknown flag --{key}")));
            }
        }
        Ok(())
    }

    /// Desk defaults, then `--config`, then per-key flags. The second value
    /// tells whether any model key was set explicitly.
    fn run_config(&self) -> Result<(RunConfig, bool)> {
        self.run_config_from(RunConfig::desk())
    }

    fn run_config_from(&self, mut cfg: RunConfig) -> Result<(RunConfig, bool)> {
        let mut explicit_model = false;
        if let Some(path) = self.get("config") {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
            explicit_model = text
                .lines()
                .filter_map(|l| l.split('#').next()?.split_once('='))
                .any(|(k, _)| RunConfig::MODEL_KEYS.contains(&k.trim()));
        }
        for (k, v) in &self.values {
            if RunConfig::is_key(k) {
                cfg.set(k, v)?;
                explicit_model |= RunConfig::MODEL_KEYS.contains(&k.as_str());
            }
        }
        cfg.validate()?;
        Ok((cfg, explicit_model))
    }
}

/// Runs one command; `args` excludes the program name.
pub fn run(args: &[String]) -> Result<()> {
    let Some((cmd, rest)) = args.split_first() else {
        return Err(Error::Config(format!("no command given\n{USAGE}")));
    };
    let flags = Flags::parse(rest)?;
    match cmd.as_str() {
        "gen" => cmd_gen(&flags),
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "ablate" => cmd_ablate(&flags),
        "profile" => cmd_profile(&flags),
        "render" => cmd_render(&flags),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command {other:?}\n{USAGE}"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn histogram_text(data: &Dataset) -> String {
    data.length_histogram()
        .iter()
        .map(|(len, n)| format!("{len}:{n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_gen(flags: &Flags) -> Result<()> {
    flags.check(&["seed", "count", "size", "out"], false)?;
    let seed = flags.num("seed", 0u64)?;
    let count = flags.num("count", 64usize)?;
    let size = flags.num("size", 64usize)?;
    let out = flags.path("out")?;
    if count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let data = generate(seed, count, size, size)?;
    data.save(&out)?;
    println!("samples     {}", data.samples.len());
    println!("vocabulary  {}", data.vocab.len());
    println!("lengths     {}", histogram_text(&data));
    Ok(())
}

/// Checks that `data` fits the model's input geometry and vocabulary.
fn check_data(data: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::Invalid("dataset has no samples".into()));
    }
    for s in &data.samples {
        if s.image.shape() != [cfg.image_h, cfg.image_w, cfg.channels] {
            return Err(Error::Config(format!(
                "sample {} is {:?}, model expects {}×{}×{}",
                s.id,
                s.image.shape(),
                cfg.image_h,
                cfg.image_w,
                cfg.channels
            )));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Config(format!(
                "sample {} uses token {t}, vocabulary size is {}",
                s.id, cfg.vocab_size
            )));
        }
    }
    Ok(())
}

fn progress(row: &LogRow) {
    if let Some(iou) = row.eval_iou {
        println!(
            "iter {:>6}  lr {:.3e}  loss {:.5}  IoU {:.2}",
            row.iter,
            row.lr,
            row.loss.total,
            100.0 * iou
        );
    }
}

fn cmd_train(flags: &Flags) -> Result<()> {
    flags.check(&["config", "data", "out", "resume", "until"], true)?;
    let (mut cfg, explicit_model) = flags.run_config()?;
    let data = Dataset::load(&flags.path("data")?)?;
    let out = PathBuf::from(flags.get("out").unwrap_or("run"));
    let log_path = out.join("train_log.csv");

    let mut trainer = match flags.get("resume") {
        None => {
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
        Some(path) => {
            let (model, opt) = checkpoint::load(Path::new(path))?;
            if explicit_model && model.config != cfg.model {
                return Err(Error::Config(format!("model settings differ from those stored in {path}")));
            }
            cfg.model = model.config.clone();
            let opt = opt.ok_or_else(|| Error::Invalid(format!("{path} holds no optimizer state")))?;
            Trainer::resume(model, opt, cfg.train.clone())?
        }
    };
    check_data(&data, &cfg.model)?;
    let until = flags.num("until", cfg.train.total_iters)?;
    if until < trainer.iter {
        return Err(Error::Config(format!("--until {until} is before the resumed step {}", trainer.iter)));
    }

    create_dir(&out)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let rows = trainer.run_until(until, &data.samples, &data.samples, progress)?;
    checkpoint::save(&out.join("model.ckpt"), &trainer.model, Some(&trainer.opt))?;

    let mut log = log_csv(&rows);
    if flags.get("resume").is_some() {
        if let Ok(previous) = fs::read_to_string(&log_path) {
            log = previous + log.split_once('\n').map_or("", |(_, body)| body);
        }
    }
    write(&log_path, log)?;
    println!("saved {} after {} steps", out.join("model.ckpt").display(), trainer.iter);
    Ok(())
}

fn load_model_and_data(flags: &Flags) -> Result<(Model, Dataset)> {
    let (model, _) = checkpoint::load(&flags.path("ckpt")?)?;
    let data = Dataset::load(&flags.path("data")?)?;
    check_data(&data, &model.config)?;
    Ok((model, data))
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    flags.check(&["ckpt", "data", "buckets", "out"], false)?;
    let buckets = match flags.get("buckets") {
        Some(spec) => spec.parse()?,
        None => Buckets::standard(),
    };
    let (model, data) = load_model_and_data(flags)?;
    let report = evaluate(&model, &data.samples, Some(&buckets))?;
    print!("{}", report.to_text());
    if let Some(out) = flags.get("out") {
        let out = Path::new(out);
        create_dir(out)?;
        write(&out.join("eval.csv"), report.to_csv())?;
        write(&out.join("eval.txt"), report.to_text())?;
    }
    Ok(())
}

fn parse_fault(flags: &Flags) -> Result<Option<Fault>> {
    match flags.get("inject-fault") {
        None | Some("none") => Ok(None),
        Some("gelu") => Ok(Some(Fault::GeluAdjoint)),
        Some("matmul") => Ok(Some(Fault::MatmulAdjoint)),
        Some(v) => Err(Error::Config(format!("unknown fault {v:?} (gelu, matmul)"))),
    }
}

fn cmd_gradcheck(flags: &Flags) -> Result<()> {
    flags.check(&["scope", "inject-fault", "seeds", "count", "seed"], false)?;
    let fault = parse_fault(flags)?;
    let scope = flags.get("scope").unwrap_or("ops");
    let failed = match scope {
        "ops" => {
            let seeds: Vec<u64> = (1..=flags.num("seeds", 5u64)?).collect();
            let results = check_ops(&seeds, fault)?;
            for r in &results {
                let status = if r.report.passed { "ok" } else { "FAIL" };
                println!("{:<22} seed {:<3} max rel {:.2e}  {status}", r.name, r.seed, r.report.max_rel_error);
            }
            let failed = results.iter().filter(|r| !r.report.passed).count();
            println!("{} checks, {failed} failed", results.len());
            failed
        }
        "model" => {
            let count = flags.num("count", 50usize)?;
            let check = check_model(&tiny_model_config(), count, flags.num("seed", 0u64)?, fault)?;
            for (name, i, a, n, e) in &check.entries {
                println!("{name}[{i}]  analytic {a:+.6e}  numeric {n:+.6e}  rel {e:.2e}");
            }
            println!("max relative error {:.3e} (tolerance 1e-3)", check.max_rel_error);
            usize::from(check.max_rel_error > 1e-3)
        }
        other => return Err(Error::Config(format!("unknown scope {other:?} (ops, model)"))),
    };
    if failed > 0 {
        return Err(Error::Check(format!("{scope} gradient check")));
    }
    println!("PASS");
    Ok(())
}

/// One sweep setting: a label and the config overrides it applies.
pub type Setting = (String, Vec<(&'static str, String)>);

pub fn sweep(what: &str) -> Result<Vec<Setting>> {
    let single = |key: &'static str, values: &[&str]| {
        values
            .iter()
            .map(|v| (format!("{key}={v}"), vec![(key, v.to_string())]))
            .collect()
    };
    Ok(match what {
        "variant" => FusionVariant::ALL
            .iter()
            .map(|v| (v.to_string(), vec![("fusion_variant", v.to_string())]))
            .collect(),
        "lambda" => single("lambda", &["0.01", "0.05", "0.1", "0.5", "1"]),
        "tau" => single("tau", &["0.5", "0.6", "0.7", "0.8", "0.9"]),
        "layers" => [2, 4]
            .iter()
            .flat_map(|l| {
                [true, false].map(|d| {
                    (
                        format!("layers={l} decoder={d}"),
                        vec![("fusion_layers", l.to_string()), ("decoder", d.to_string())],
                    )
                })
            })
            .collect(),
        other => return Err(Error::Config(format!("unknown sweep {other:?} (variant, layers, lambda, tau)"))),
    })
}

fn cmd_ablate(flags: &Flags) -> Result<()> {
    flags.check(&["what", "data", "out", "config"], true)?;
    let what = flags.require("what")?;
    let settings = sweep(what)?;
    let (base, _) = flags.run_config()?;
    let data = Dataset::load(&flags.path("data")?)?;
    check_data(&data, &base.model)?;
    let out = PathBuf::from(flags.get("out").map_or_else(|| format!("ablate_{what}.csv"), str::to_string));

    let mut csv = String::from("sweep,setting,params,final_loss,cumulative_iou,prec_0.5\n");
    for (label, pairs) in settings {
        let mut cfg = base.clone();
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
        let params = model.param_count();
        let mut trainer = Trainer::new(model, cfg.train.clone())?;
        let rows = trainer.run_until(cfg.train.total_iters, &data.samples, &[], |_| {})?;
        let report = evaluate(&trainer.model, &data.samples, None)?;
        let loss = rows.last().map_or(f64::NAN, |r| r.loss.total);
        let prec = report.prec.iter().find(|(t, _)| (t - 0.5).abs() < 1e-9).map_or(f64::NAN, |p| p.1);
        println!("{label:<28} loss {loss:.5}  IoU {:.2}", 100.0 * report.cumulative_iou);
        let _ = writeln!(csv, "{what},{label},{params},{loss:.8},{:.6},{prec:.6}", report.cumulative_iou);
    }
    write(&out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_profile(flags: &Flags) -> Result<()> {
    flags.check(&["config", "geometry", "measure", "out"], true)?;
    let base = match flags.get("geometry") {
        None | Some("desk") => RunConfig::desk(),
        Some("reference") => RunConfig {
            model: ModelConfig::reference(),
            ..RunConfig::desk()
        },
        Some(v) => return Err(Error::Config(format!("unknown geometry {v:?} (desk, reference)"))),
    };
    let (cfg, _) = flags.run_config_from(base)?;
    let measure = flags.flag("measure")?;
    let rows: Vec<_> = FusionVariant::ALL.iter().map(|&v| profile(&cfg.model, v)).collect();
    let mut csv = profile_csv(&rows);
    if measure {
        let mut lines: Vec<String> = csv.lines().map(str::to_string).collect();
        lines[0].push_str(",measured_macs");
        for (line, r) in lines[1..].iter_mut().zip(&rows) {
            let _ = write!(line, ",{}", measured_macs(&cfg.model, r.variant, cfg.train.seed)?);
        }
        csv = lines.join("\n") + "\n";
    }
    print!("{csv}");
    if let Some(out) = flags.get("out") {
        write(Path::new(out), &csv)?;
    }
    Ok(())
}

/// Parses `"0,3,5-7"` into ids.
pub fn parse_ids(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("invalid id list {spec:?}"));
    let mut ids = Vec::new();
    for part in spec.split(',').map(str::trim) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                ids.extend(a..=b);
            }
            None => ids.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(ids)
}

/// Writes the three images for one sample into `dir`.
pub fn render_sample(model: &Model, sample: &Sample, dir: &Path) -> Result<()> {
    let cfg = &model.config;
    let pred = model.predict(&sample.image, &sample.tokens)?;
    let mask = binarize(&pred.pixel_logits);
    let patches = render::upscale_patches(&pred.patch_probs, cfg.grid_h(), cfg.grid_w(), cfg.patch_size)?;
    let stem = format!("{:04}", sample.id);
    write(&dir.join(format!("{stem}_mask.pgm")), render::pgm(&mask)?)?;
    write(&dir.join(format!("{stem}_patch.pgm")), render::pgm(&patches)?)?;
    write(&dir.join(format!("{stem}_overlay.ppm")), render::ppm(&render::overlay(&sample.image, &mask)?)?)
}

fn cmd_render(flags: &Flags) -> Result<()> {
    flags.check(&["ckpt", "data", "ids", "out"], false)?;
    let ids = parse_ids(flags.require("ids")?)?;
    let (model, data) = load_model_and_data(flags)?;
    let out = PathBuf::from(flags.get("out").unwrap_or("render"));
    let samples = ids
        .iter()
        .map(|&id| {
            data.samples
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::Invalid(format!("no sample with id {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&out)?;
    for s in samples {
        render_sample(&model, s, &out)?;
    }
    println!("rendered {} samples into {}", ids.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn flag_parsing() {
        let f = Flags::parse(&args("--seed 7 --measure --out x")).unwrap();
        assert_eq!(f.get("seed"), Some("7"));
        assert_eq!(f.get("measure"), Some("true"));
        assert!(Flags::parse(&args("seed 7")).is_err());
        assert!(Flags::parse(&args("--a 1 --a 2")).is_err());
        assert!(f.check(&["seed", "out"], false).is_err());
    }

    #[test]
    fn overrides_apply_over_defaults() {
        let f = Flags::parse(&args("--base_lr 0.5 --fusion_variant VME")).unwrap();
        let (cfg, explicit) = f.run_config().unwrap();
        assert_eq!(cfg.train.base_lr, 0.5);
        assert_eq!(cfg.model.fusion_variant, FusionVariant::Vme);
        assert!(explicit);
    }

    #[test]
    fn sweeps_and_ids() {
        assert_eq!(sweep("variant").unwrap().len(), 4);
        assert_eq!(sweep("lambda").unwrap().len(), 5);
        assert_eq!(sweep("tau").unwrap()[0].0, "tau=0.5");
        assert_eq!(sweep("layers").unwrap().len(), 4);
        assert!(sweep("heads").is_err());
        assert_eq!(parse_ids("0,3-5").unwrap(), vec![0, 3, 4, 5]);
        assert!(parse_ids("5-3").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(&[]).unwrap_err().exit_code(), 1);
        assert_eq!(run(&args("fly")).unwrap_err().exit_code(), 1);
        assert_eq!(run(&args("gen --count 0 --out /nonexistent")).unwrap_err().exit_code(), 1);
    }
}
