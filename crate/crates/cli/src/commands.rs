use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use lgcn_core::config::Architecture;
use lgcn_core::gradsuite::{self, SuiteOptions};
use lgcn_core::head::Descriptor;
use lgcn_core::heatmap::write_heatmaps;
use lgcn_core::io::checkpoint::Checkpoint;
use lgcn_core::io::descriptors::{DescriptorDump, Precision};
use lgcn_core::io::ppm::load_image;
use lgcn_core::io::sha256_hex;
use lgcn_core::manifest::{Manifest, Split};
use lgcn_core::model::Lgcn;
use lgcn_core::retrieval::{brute_force_recall, evaluate, is_match, search, RecallResult};
use lgcn_core::synth::{audit, generate_world, Audit};
use lgcn_core::tensor::gradcheck::GradCheckOptions;
use lgcn_core::train::{self, Dataset};
use serde::Serialize;

use crate::args::{Ablation, EvalArgs, GenArgs, GradcheckArgs, HeatmapArgs, PrecisionArg, TrainArgs};
use crate::run_config::RunConfig;
use crate::UsageError;

#[derive(Serialize)]
struct GenSummary<'a> {
    records: usize,
    manifest: String,
    manifest_sha256: String,
    audit: &'a Audit,
}

pub fn gen(a: &GenArgs) -> anyhow::Result<()> {
    let world = generate_world(a.seed, a.places, a.views, a.size).map_err(|e| UsageError(e.to_string()))?;
    let path = world.write(&a.out)?;
    let report = audit(&world.manifest("audit"))?;
    let summary = GenSummary {
        records: world.views.len(),
        manifest: path.display().to_string(),
        manifest_sha256: sha256_hex(&std::fs::read(&path)?),
        audit: &report,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !report.ok() {
        bail!(
            "geotag audit failed: views of one place up to {:.2} m apart, places as close as {:.2} m",
            report.max_intra_m,
            report.min_inter_m
        );
    }
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(a)?;
    let data = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.json"), cfg.echo() + "\n")?;
    let model = Lgcn::new(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train::train(model, &data, &cfg.train, Some(&a.out))?;
    Checkpoint::from_model(&outcome.model, "final").write(&a.out.join("final.ckpt"))?;
    println!("epoch  loss      triplets  recall@{:?}", cfg.train.recall_n);
    for r in &outcome.reports {
        let loss = r.loss.map_or("-".to_string(), |l| format!("{l:.5}"));
        let recalls: Vec<String> = r.recall.iter().map(|v| format!("{v:.4}")).collect();
        println!("{:<6} {:<9} {:<9} {}", r.epoch, loss, r.triplets, recalls.join(" "));
    }
    Ok(())
}

fn load_model(path: &Path, ablation: &Ablation) -> anyhow::Result<Lgcn> {
    let model = Checkpoint::read(path)
        .and_then(Checkpoint::into_model)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ablation.is_empty() {
        return Ok(model);
    }
    let arch = ablation.apply(model.cfg.arch);
    model.with_arch(arch).map_err(|e| UsageError(e.to_string()).into())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    recall: RecallResult,
    arch: Architecture,
    descriptor_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_agrees: Option<bool>,
}

fn ordered(manifest: &Manifest, d: &HashMap<u64, Descriptor>) -> Vec<(u64, Descriptor)> {
    manifest.records.iter().map(|r| (r.id, d[&r.id].clone())).collect()
}

fn per_query_csv(manifest: &Manifest, d: &HashMap<u64, Descriptor>, k: usize, threshold: f64) -> anyhow::Result<String> {
    let db: Vec<(u64, Descriptor)> = manifest.split(Split::Database).map(|r| (r.id, d[&r.id].clone())).collect();
    let queries: Vec<_> = manifest.split(Split::Query).collect();
    let qd: Vec<Descriptor> = queries.iter().map(|r| d[&r.id].clone()).collect();
    let hits = search(&qd, &db, k)?;
    let by_id: HashMap<u64, _> = manifest.records.iter().map(|r| (r.id, r)).collect();
    let mut out = String::from("query_id,rank,db_id,similarity,correct\n");
    for (q, hs) in queries.iter().zip(hits) {
        for (rank, h) in hs.iter().enumerate() {
            let correct = is_match(q, by_id[&h.id], threshold)?;
            writeln!(out, "{},{},{},{:.9},{}", q.id, rank + 1, h.id, h.similarity, correct)?;
        }
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    if a.n_values.is_empty() || a.n_values.contains(&0) {
        return Err(UsageError("recall cut-offs must be positive".into()).into());
    }
    let model = load_model(&a.checkpoint, &a.ablation)?;
    let data = load_dataset(&a.data)?;
    let d = data.describe(&model)?;
    let recall = evaluate(&data.manifest, &d, &a.n_values, a.threshold, a.per_query)?;
    let full = DescriptorDump {
        precision: Precision::F64,
        dim: model.cfg.descriptor_dim(),
        rows: ordered(&data.manifest, &d),
    };
    let oracle_agrees = if a.oracle_check {
        let reference = brute_force_recall(&data.manifest, &d, &a.n_values, a.threshold)?;
        Some(reference == recall.recalls)
    } else {
        None
    };
    let report = EvalReport {
        recall,
        arch: model.cfg.arch,
        descriptor_sha256: sha256_hex(&full.encode()),
        oracle_agrees,
    };
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, &json)?,
        None => print!("{json}"),
    }
    if let Some(p) = &a.per_query_csv {
        let k = a.n_values.iter().copied().max().unwrap_or(1);
        std::fs::write(p, per_query_csv(&data.manifest, &d, k, a.threshold)?)?;
    }
    if let Some(p) = &a.dump {
        let precision = match a.dump_precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
        DescriptorDump { precision, ..full }.write(p)?;
    }
    if oracle_agrees == Some(false) {
        bail!("harness recall disagrees with the brute-force reference");
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let opts = SuiteOptions {
        check: GradCheckOptions {
            eps: a.eps,
            tol: a.tol,
            ..GradCheckOptions::default()
        },
        inject_bug: a.inject_bug,
        seed: a.seed,
    };
    let reports = gradsuite::run(a.scope, opts);
    let width = reports.iter().map(|r| r.op.len()).max().unwrap_or(2).max(2);
    println!("{:<width$}  {:>12}  result", "op", "max rel err");
    for r in &reports {
        println!(
            "{:<width$}  {:>12.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} of {} checks passed (tol {:e}, eps {:e})", reports.len() - failed, reports.len(), a.tol, a.eps);
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

pub fn heatmap(a: &HeatmapArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint, &a.ablation)?;
    let image = load_image(&a.image).with_context(|| format!("loading {}", a.image.display()))?;
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    for p in write_heatmaps(&model, &image, &a.out, &stem, a.scale)? {
        println!("{}  {}", sha256_hex(&std::fs::read(&p)?), p.display());
    }
    Ok(())
}
