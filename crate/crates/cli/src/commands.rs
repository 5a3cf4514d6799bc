use std::fmt::{Display, Write as _};
use std::fs;
use std::path::Path;

use hlspower::activity::{parse_traces, serialize_traces};
use hlspower::dataset::{read_meta, read_sample, sorted_entries, write_record};
use hlspower::dse::{random_search, ExploreResult};
use hlspower::interp::parse_stimuli;
use hlspower::model::ensemble_predict;
use hlspower::sample::serialize_sample;
use hlspower::synth::{gen_dataset, gen_space};
use hlspower::train::{evaluate, evaluate_single, train_holdout};
use hlspower::{
    annotate_features, construct_graph, derive_seed, explore, interpret_dfg, load_dataset,
    parse_dfg, serialize_dfg, split_leave_one_out, train_ensemble, DesignPoint, Dfg, ExploreConfig,
    GraphSample, HecGnnConfig, PowerKind,
};

use crate::failure::Failure;
use crate::manifest::{Manifest, MemberEntry, MANIFEST_FILE};
use crate::settings::Settings;
use crate::{ConstructArgs, DseArgs, EvalArgs, PredictArgs, SynthArgs, TraceArgs, TrainArgs};

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

/// Prefixes a parse error with the file it came from.
fn at<E: Display>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::validation(format!("{}: {e}", path.display()))
}

fn load_constructed(path: &Path, raw: bool) -> Result<Dfg, Failure> {
    let g = parse_dfg(&read(path)?).map_err(at(path))?;
    if raw {
        return Ok(g);
    }
    let mut diags = Vec::new();
    let c = construct_graph(&g, &mut diags);
    for d in diags {
        log::info!("{}: {d}", path.display());
    }
    Ok(c)
}

fn build_sample(dfg: &Path, trace: &Path) -> Result<(Dfg, GraphSample), Failure> {
    let g = load_constructed(dfg, false)?;
    let traces = parse_traces(&read(trace)?).map_err(at(trace))?;
    let sample = annotate_features(&g, &traces).map_err(at(trace))?;
    Ok((g, sample))
}

pub fn construct(a: &ConstructArgs) -> Result<(), Failure> {
    if let Some(root) = &a.data {
        return construct_dataset(root);
    }
    let (Some(input), Some(trace), Some(out)) = (&a.input, &a.trace, &a.out) else {
        return Err(Failure::validation(
            "construct needs --in, --trace and --out",
        ));
    };
    let (graph, sample) = build_sample(input, trace)?;
    write(out, &serialize_sample(&sample))?;
    if let Some(path) = &a.graph_out {
        write(path, &serialize_dfg(&graph))?;
    }
    println!("nodes={} edges={}", sample.num_nodes(), sample.edges.len());
    Ok(())
}

fn construct_dataset(root: &Path) -> Result<(), Failure> {
    let mut count = 0;
    for app in sorted_entries(root)? {
        if !app.is_dir() {
            continue;
        }
        for dfg in sorted_entries(&app)? {
            if dfg.extension().and_then(|e| e.to_str()) != Some("dfg") {
                continue;
            }
            let trace = dfg.with_extension("trace");
            if !trace.exists() {
                log::warn!("{}: no trace, skipped", dfg.display());
                continue;
            }
            let (_, sample) = build_sample(&dfg, &trace)?;
            write(&dfg.with_extension("sample"), &serialize_sample(&sample))?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Failure::validation(format!(
            "no .dfg/.trace pairs under {}",
            root.display()
        )));
    }
    println!("samples={count}");
    Ok(())
}

pub fn trace(a: &TraceArgs) -> Result<(), Failure> {
    let g = load_constructed(&a.dfg, a.raw)?;
    let stimuli = parse_stimuli(&read(&a.stimuli)?).map_err(at(&a.stimuli))?;
    let traces = interpret_dfg(&g, &stimuli.restricted_to(&g), a.iters)?;
    write(&a.out, &serialize_traces(&traces))
}

pub fn synth(a: &SynthArgs, s: &Settings) -> Result<(), Failure> {
    let records: Vec<_> = if a.space {
        gen_space(derive_seed(s.seed, "space"))?
            .into_iter()
            .map(|p| p.record)
            .collect()
    } else {
        gen_dataset(a.count, derive_seed(s.seed, "synth"), PowerKind::Total)?
    };
    for r in &records {
        write_record(&a.out, r)?;
    }
    println!("samples={}", records.len());
    Ok(())
}

pub fn train(a: &TrainArgs, mut s: Settings) -> Result<(), Failure> {
    if let Some(e) = a.epochs {
        s.set("model.epochs", &e.to_string())?;
    }
    if let Some(f) = a.folds {
        s.set("train.folds", &f.to_string())?;
    }
    if let Some(list) = &a.seeds {
        s.set("train.seeds", list)?;
    }
    let ds = load_dataset(&a.data, a.power)?;
    let (train, test) = split_leave_one_out(&ds, &a.target)?;
    log::info!(
        "training on {} samples, {} held out",
        train.len(),
        test.len()
    );
    let config = a
        .variant
        .apply(&s.model_config(HecGnnConfig::for_power(a.power))?);
    fs::create_dir_all(&a.out).map_err(|e| Failure::io(&a.out, e))?;
    let member_seed = |label: u64| derive_seed(s.seed, &format!("train{label}"));

    let mut entries = Vec::new();
    if a.variant.is_ensemble() {
        let actual: Vec<u64> = s.seeds.iter().map(|&l| member_seed(l)).collect();
        let members = train_ensemble(&train, &config, &actual, s.folds)?;
        for m in members {
            let label = s.seeds[actual
                .iter()
                .position(|&x| x == m.seed)
                .expect("seed of a member")];
            let stem = format!("member-s{label}-f{}", m.fold);
            write(
                &a.out.join(format!("{stem}.ckpt")),
                &m.model.to_checkpoint(),
            )?;
            write(&a.out.join(format!("{stem}.csv")), &m.report.to_csv())?;
            entries.push(MemberEntry {
                file: format!("{stem}.ckpt"),
                seed: label,
                fold: Some(m.fold),
                best_epoch: m.report.best_epoch,
                val_mape: m.report.best_val_mape,
            });
        }
    } else {
        let label = s.seeds[0];
        let (model, report, _) = train_holdout(&train, s.holdout, &config, member_seed(label))?;
        let stem = format!("member-s{label}");
        write(&a.out.join(format!("{stem}.ckpt")), &model.to_checkpoint())?;
        write(&a.out.join(format!("{stem}.csv")), &report.to_csv())?;
        entries.push(MemberEntry {
            file: format!("{stem}.ckpt"),
            seed: label,
            fold: None,
            best_epoch: report.best_epoch,
            val_mape: report.best_val_mape,
        });
    }
    let manifest = Manifest {
        power: a.power,
        target: a.target.clone(),
        variant: a.variant,
        members: entries,
    };
    write(&a.out.join(MANIFEST_FILE), &manifest.render())?;
    println!("members={}", manifest.members.len());
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<(), Failure> {
    let manifest = Manifest::read(&a.ckpt_dir)?;
    let models = manifest.load_models(&a.ckpt_dir)?;
    let mut sample = read_sample(&a.sample)?;
    let meta_path = a
        .meta
        .clone()
        .unwrap_or_else(|| a.sample.with_extension("meta"));
    if a.meta.is_some() || meta_path.exists() {
        sample.metadata = Some(read_meta(&meta_path)?.metadata);
    }
    let watts = ensemble_predict(&sample, &models).map_err(at(&a.sample))?;
    println!("power_watts={watts}");
    Ok(())
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:?}"))
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let manifest = Manifest::read(&a.ckpt_dir)?;
    if manifest.target != a.target {
        return Err(Failure::validation(format!(
            "checkpoints were trained with `{}` held out, not `{}`",
            manifest.target, a.target
        )));
    }
    let models = manifest.load_models(&a.ckpt_dir)?;
    let ds = load_dataset(&a.data, manifest.power)?;
    let (_, test) = split_leave_one_out(&ds, &a.target)?;
    let mut csv = String::from("fold,seed,val_mape,test_mape\n");
    for (entry, model) in manifest.members.iter().zip(&models) {
        let fold = entry.fold.map_or("-".to_string(), |f| f.to_string());
        let test_mape = evaluate_single(model, &test)?;
        let _ = writeln!(
            csv,
            "{fold},{},{},{test_mape:?}",
            entry.seed,
            opt_csv(entry.val_mape)
        );
    }
    let vals: Vec<f64> = manifest.members.iter().filter_map(|m| m.val_mape).collect();
    let mean_val = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let _ = writeln!(
        csv,
        "ensemble,-,{},{:?}",
        opt_csv(mean_val),
        evaluate(&models, &test)?
    );
    match &a.out {
        Some(path) => write(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn results_csv(result: &ExploreResult) -> String {
    let mut out = String::from("iter,budget,adrs,frontier_size\n");
    for l in &result.trace {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{}",
            l.iter, l.budget, l.adrs, l.frontier_size
        );
    }
    out
}

pub fn dse(a: &DseArgs, s: &Settings) -> Result<(), Failure> {
    let manifest = Manifest::read(&a.ckpt_dir)?;
    let models = manifest.load_models(&a.ckpt_dir)?;
    let ds = load_dataset(&a.space, manifest.power)?;
    let samples: Vec<&GraphSample> = ds.samples().collect();
    let points: Vec<DesignPoint> = samples
        .iter()
        .enumerate()
        .map(|(id, smp)| {
            let latency = smp
                .metadata
                .as_ref()
                .map(|m| m.latency)
                .ok_or_else(|| Failure::validation(format!("{}: no metadata", smp.name)))?;
            let true_power = smp
                .watts()
                .ok_or_else(|| Failure::validation(format!("{}: no label", smp.name)))?;
            Ok(DesignPoint {
                id,
                latency,
                true_power,
            })
        })
        .collect::<Result<_, Failure>>()?;
    let cfg = ExploreConfig {
        init_fraction: a.init,
        total_fraction: a.budget,
        batch: a.batch,
        seed: derive_seed(s.seed, "dse"),
    };
    let result = explore(
        &points,
        |p| ensemble_predict(samples[p.id], &models).map_err(|e| e.to_string()),
        &cfg,
    )?;
    write(&a.out, &results_csv(&result))?;
    let mut frontier = String::from("latency,power,design\n");
    for (id, [lat, pow]) in &result.frontier.points {
        let _ = writeln!(frontier, "{lat:?},{pow:?},{}", samples[*id].name);
    }
    let frontier_path = a.out.with_file_name("frontier.csv");
    write(&frontier_path, &frontier)?;
    let final_adrs = result.trace.last().map_or(f64::NAN, |l| l.adrs);
    let baseline = random_search(&points, a.budget, derive_seed(s.seed, "dse-random"))?;
    println!(
        "adrs={final_adrs:?} random_adrs={baseline:?} sampled={} frontier={}",
        result.sampled.len(),
        result.frontier.len()
    );
    Ok(())
}
