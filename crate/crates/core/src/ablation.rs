//! Built-in experiment grids and the multi-seed runner.
//!
//! Grids:
//!
//! - `components`: plain CE, each robust component alone, their pairs, the
//!   full method and the threshold/EMA/re-weighting knock-outs (13 variants)
//! - `m-sweep`: the full method with m in {0.85, 0.90, 0.95, 0.99, 0.999}
//!   and the teacher factor held at 0.85
//! - `alpha-sweep`: the full method with the teacher factor in the same set
//!   and m held at 0.85
//!
//! Any single variant name from `components` is also accepted as a grid of
//! one. Seeds run from `config.seed` to `config.seed + R - 1`. Runs land in
//! `<out>/<variant>/seed_<s>/` and the comparison table in `<out>/ablation.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{AblationSwitches, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::mean_sd;
use crate::report;
use crate::trainer::{self, RunReport};

pub const GRIDS: [&str; 3] = ["components", "m-sweep", "alpha-sweep"];
pub const SWEEP_VALUES: [f64; 5] = [0.85, 0.90, 0.95, 0.99, 0.999];
/// Value of the factor that a sweep holds fixed.
pub const SWEEP_HELD: f64 = 0.85;
pub const DEFAULT_SEEDS: usize = 3;
pub const THREADS_ENV: &str = "SEDLAB_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub switches: AblationSwitches,
    /// Overrides for the EMA factors; `None` keeps the base config value.
    pub m: Option<f64>,
    pub alpha: Option<f64>,
}

impl Variant {
    fn components(name: &str, scs: bool, scr: bool, cr: bool) -> Self {
        Variant {
            name: name.to_string(),
            switches: AblationSwitches {
                use_scs: scs,
                use_scr: scr,
                use_cr: cr,
                ..AblationSwitches::default()
            },
            m: None,
            alpha: None,
        }
    }

    fn tweak(mut self, f: impl FnOnce(&mut AblationSwitches)) -> Self {
        f(&mut self.switches);
        self
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.ablation = self.switches;
        if let Some(m) = self.m {
            c.m = m;
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        c
    }
}

/// The component grid, in table order.
pub fn component_variants() -> Vec<Variant> {
    vec![
        Variant::components("standard", false, false, false),
        Variant::components("scs-no-local", true, false, false)
            .tweak(|s| s.use_local_thresholds = false),
        Variant::components("scs-no-global", true, false, false)
            .tweak(|s| s.use_global_thresholds = false),
        Variant::components("scs-no-ema", true, false, false).tweak(|s| s.use_ema = false),
        Variant::components("scs", true, false, false),
        Variant::components("scr", false, true, false),
        Variant::components("cr", false, false, true),
        Variant::components("scs-scr-no-reweight", true, true, false)
            .tweak(|s| s.use_reweighting = false),
        Variant::components("scs-scr-no-ema", true, true, false).tweak(|s| s.use_ema = false),
        Variant::components("scs-scr", true, true, false),
        Variant::components("scs-cr", true, false, true),
        Variant::components("scr-cr", false, true, true),
        Variant::components("full", true, true, true),
    ]
}

fn sweep_name(prefix: &str, v: f64) -> String {
    format!("{prefix}-{v}")
}

pub fn grid(name: &str) -> Result<Vec<Variant>> {
    match name {
        "components" => Ok(component_variants()),
        "m-sweep" => Ok(SWEEP_VALUES
            .iter()
            .map(|&m| Variant {
                name: sweep_name("m", m),
                switches: AblationSwitches::default(),
                m: Some(m),
                alpha: Some(SWEEP_HELD),
            })
            .collect()),
        "alpha-sweep" => Ok(SWEEP_VALUES
            .iter()
            .map(|&a| Variant {
                name: sweep_name("alpha", a),
                switches: AblationSwitches::default(),
                m: Some(SWEEP_HELD),
                alpha: Some(a),
            })
            .collect()),
        other => component_variants()
            .into_iter()
            .find(|v| v.name == other)
            .map(|v| vec![v])
            .ok_or_else(|| {
                let variants: Vec<String> =
                    component_variants().into_iter().map(|v| v.name).collect();
                Error::param(format!(
                    "unknown grid '{other}'; available grids: {}; single variants: {}",
                    GRIDS.join(", "),
                    variants.join(", ")
                ))
            }),
    }
}

/// Mean and sample standard deviation of final accuracies over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub m: f64,
    pub alpha: f64,
    pub reports: Vec<RunReport>,
    pub acc_a: (f64, f64),
    pub acc_b: (f64, f64),
    pub precision: Option<f64>,
}

impl VariantResult {
    fn new(variant: Variant, config: &TrainConfig, reports: Vec<RunReport>) -> Self {
        let finals = |f: fn(&RunReport) -> Option<f64>| -> Vec<f64> {
            reports.iter().filter_map(f).collect()
        };
        let prec = finals(|r| r.summary.final_precision);
        VariantResult {
            m: config.m,
            alpha: config.alpha,
            acc_a: mean_sd(&finals(|r| r.summary.final_acc_a)),
            acc_b: mean_sd(&finals(|r| r.summary.final_acc_b)),
            precision: (!prec.is_empty()).then(|| mean_sd(&prec).0),
            variant,
            reports,
        }
    }
}

/// Worker count: `SEDLAB_THREADS` when set to a positive integer, otherwise
/// rayon's default.
pub fn worker_count() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::config(THREADS_ENV, format!("must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every variant of `grid_name` over `seeds` seeds. With `out` set,
/// each run directory and `ablation.csv` are written there.
pub fn ablate(
    base: &TrainConfig,
    grid_name: &str,
    seeds: usize,
    out: Option<&Path>,
    started_at: Option<&str>,
) -> Result<Vec<VariantResult>> {
    if seeds == 0 {
        return Err(Error::param("at least one seed is required"));
    }
    let variants = grid(grid_name)?;
    let configs: Vec<TrainConfig> = variants.iter().map(|v| v.apply(base)).collect();
    for c in &configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| (0..seeds as u64).map(move |r| (v, r)))
        .collect();
    let run_job = |&(v, r): &(usize, u64)| -> Result<RunReport> {
        let mut config = configs[v].clone();
        config.seed = base.seed + r;
        let report = trainer::run(&config)?;
        if let Some(out) = out {
            let dir = out
                .join(&variants[v].name)
                .join(format!("seed_{}", config.seed));
            report::write_run(&report, &dir, started_at)?;
        }
        Ok(report)
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Numeric(format!("could not start worker pool: {e}")))?;
    let reports: Vec<RunReport> =
        pool.install(|| jobs.par_iter().map(run_job).collect::<Result<Vec<_>>>())?;

    let mut reports = reports.into_iter();
    let results: Vec<VariantResult> = variants
        .into_iter()
        .zip(&configs)
        .map(|(variant, config)| {
            let runs: Vec<RunReport> = reports.by_ref().take(seeds).collect();
            VariantResult::new(variant, config, runs)
        })
        .collect();
    if let Some(out) = out {
        let path = out.join("ablation.csv");
        fs::write(&path, ablation_csv(&results)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(results)
}

pub fn ablation_csv(results: &[VariantResult]) -> String {
    let mut s = String::from(
        "variant,m,alpha,seeds,acc_A_mean,acc_A_sd,acc_B_mean,acc_B_sd,sel_precision_mean\n",
    );
    for r in results {
        write!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},",
            r.variant.name,
            r.m,
            r.alpha,
            r.reports.len(),
            r.acc_a.0,
            r.acc_a.1,
            r.acc_b.0,
            r.acc_b.1
        )
        .unwrap();
        if let Some(p) = r.precision {
            write!(s, "{p:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;

    #[test]
    fn grid_sizes_and_values() {
        let comps = grid("components").unwrap();
        assert_eq!(comps.len(), 13);
        assert_eq!(comps[0].switches, AblationSwitches::standard());
        assert_eq!(comps[12].switches, AblationSwitches::default());
        let mut names: Vec<&str> = comps.iter().map(|v| v.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 13);

        let m = grid("m-sweep").unwrap();
        assert_eq!(m.iter().map(|v| v.m.unwrap()).collect::<Vec<_>>(), SWEEP_VALUES);
        assert!(m.iter().all(|v| v.alpha == Some(0.85)));
        let a = grid("alpha-sweep").unwrap();
        assert_eq!(a.iter().map(|v| v.alpha.unwrap()).collect::<Vec<_>>(), SWEEP_VALUES);
        assert!(a.iter().all(|v| v.m == Some(0.85)));
    }

    #[test]
    fn unknown_grid_lists_choices() {
        let err = grid("tables").unwrap_err().to_string();
        for g in GRIDS {
            assert!(err.contains(g), "{err}");
        }
    }

    #[test]
    fn single_variant_grid() {
        let g = grid("scs-cr").unwrap();
        assert_eq!(g.len(), 1);
        assert!(g[0].switches.use_scs && g[0].switches.use_cr && !g[0].switches.use_scr);
    }

    #[test]
    fn ablate_writes_runs_and_table() {
        let mut base = TrainConfig::with_dataset(DatasetConfig {
            num_classes: 3,
            dim: 2,
            train_per_class: 12,
            test_per_class: 4,
            ..DatasetConfig::default()
        });
        base.hidden = 4;
        base.batch_size = 12;
        base.warmup_epochs = 1;
        base.total_epochs = 2;
        base.seed = 7;
        let dir = tempfile::tempdir().unwrap();
        let results = ablate(&base, "m-sweep", 2, Some(dir.path()), None).unwrap();
        assert_eq!(results.len(), 5);
        for r in &results {
            assert_eq!(r.reports.len(), 2);
            assert_eq!(r.reports[0].config.seed, 7);
            assert_eq!(r.reports[1].config.seed, 8);
            assert!(dir.path().join(&r.variant.name).join("seed_8/epochs.csv").exists());
            assert_eq!(r.reports[0].dataset_hash, results[0].reports[0].dataset_hash);
        }
        let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(table.lines().count(), 6);
        assert!(table.lines().nth(1).unwrap().starts_with("m-0.85,0.85,0.85,2,"));
    }
}
