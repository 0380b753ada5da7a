use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use boxreg::datasets::{filter_categories, load_annotations, read_scene_cache, synth_scenes, write_scene_cache};
use boxreg::metrics::{corloc, mean_iou_trajectory, recall_curve, write_recall_svg, write_table, EvalRecord, Series};
use boxreg::proposals::rank_boxes;
use boxreg::records::{read_boxes, read_proposals, write_boxes, write_proposals, ImageRecords};
use boxreg::regressor::{refine_with_features, save_model, StopReason};
use boxreg::sampler::worker_rng;
use boxreg::{generate_proposals, generate_training_boxes, load_model, seed_grid, BBox, Scene};
use log::{info, warn};

use crate::config::RunConfig;
use crate::CliError;

/// Apply `f` to every item on up to `workers` threads. Output order matches input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    boxreg::atomic_write(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    Ok(())
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(boxreg::Error::from)?;
    Ok(())
}

/// Log the resolved configuration and store it beside the outputs.
fn record_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<(), CliError> {
    let text = cfg.to_toml();
    info!("resolved configuration:\n{text}");
    let path = dir.join(format!("{command}.config.toml"));
    write_text(&path, &text)
}

pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<Scene>, CliError> {
    let d = &cfg.data;
    let sources = d.annotations.is_some() as u8 + d.scenes.is_some() as u8 + d.synth as u8;
    if sources != 1 {
        return Err(CliError::Usage(
            "give exactly one scene source: --annotations, --scenes or --synth".into(),
        ));
    }
    let scenes = if let Some(p) = &d.annotations {
        let excluded: HashSet<i64> = d.exclude_categories.iter().copied().collect();
        let mut scenes = filter_categories(load_annotations(p)?, &excluded);
        if let Some(side) = d.rescale_short_side {
            scenes = scenes.iter().map(|s| s.rescaled(side)).collect();
        }
        scenes
    } else if let Some(p) = &d.scenes {
        read_scene_cache(p)?
    } else {
        synth_scenes(&cfg.synth, d.synth_count)?
    };
    info!("loaded {} scene(s)", scenes.len());
    Ok(scenes)
}

fn f(v: f64) -> String {
    v.to_string()
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scenes = load_scenes(cfg)?;
    prepare_out_dir(out)?;
    record_config(cfg, out, "train")?;
    let outcome = boxreg::train(&scenes, &cfg.train, &cfg.sampler, &cfg.loss)?;
    let rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                f(e.lr),
                f(e.train_loss),
                f(e.val_loss),
                f(e.val_mean_iou),
                e.boxes.to_string(),
                e.fallbacks.to_string(),
            ]
        })
        .collect();
    write_table(
        &out.join("train_log.csv"),
        &["epoch", "lr", "train_loss", "val_loss", "val_mean_iou", "boxes", "fallbacks"],
        &rows,
    )?;
    if let StopReason::Diverged { epoch, detail } = outcome.stop {
        return Err(boxreg::Error::Diverged { epoch, detail }.into());
    }
    let path = out.join("model.ubbr");
    save_model(&outcome.model, &path)?;
    info!(
        "stopped ({:?}) after {} epoch(s); best epoch {}; model written to {}",
        outcome.stop,
        outcome.log.len(),
        outcome.best_epoch,
        path.display()
    );
    Ok(())
}

fn scene_index(scenes: &[Scene]) -> HashMap<&str, &Scene> {
    scenes.iter().map(|s| (s.id.as_str(), s)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a Scene>, id: &str, file: &Path) -> Result<&'a Scene, CliError> {
    index.get(id).copied().ok_or_else(|| {
        CliError::Lib(boxreg::Error::Parse {
            path: file.to_path_buf(),
            detail: format!("image `{id}` is not among the loaded scenes"),
        })
    })
}

pub fn refine(cfg: &RunConfig, model_path: &Path, boxes_path: &Path, iters: usize, out: &Path) -> Result<(), CliError> {
    if iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let model = load_model(model_path)?;
    let scenes = load_scenes(cfg)?;
    prepare_out_dir(out)?;
    record_config(cfg, out, "refine")?;
    let index = scene_index(&scenes);
    let groups = read_boxes(boxes_path)?;
    let jobs = groups
        .iter()
        .map(|g| Ok((g, lookup(&index, &g.image_id, boxes_path)?)))
        .collect::<Result<Vec<_>, CliError>>()?;

    let results = par_map(&jobs, cfg.workers, |(g, scene)| {
        let fm = scene.feature_map();
        refine_with_features(&model, &fm, &g.items, iters)
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    for k in 0..iters {
        let per_image: Vec<ImageRecords<BBox>> = jobs
            .iter()
            .zip(&trajectories)
            .map(|((g, _), t)| ImageRecords {
                image_id: g.image_id.clone(),
                items: t[k].clone(),
            })
            .collect();
        write_boxes(&out.join(format!("refined_iter{}.csv", k + 1)), &per_image)?;
    }

    // Box-weighted means over images that have ground truths.
    let mut sums = vec![0.0; iters + 1];
    let mut count = 0usize;
    for ((g, scene), t) in jobs.iter().zip(&trajectories) {
        if scene.gts.is_empty() || g.items.is_empty() {
            continue;
        }
        let m = mean_iou_trajectory(&g.items, t, &scene.gts)?;
        for (s, v) in sums.iter_mut().zip(m) {
            *s += v * g.items.len() as f64;
        }
        count += g.items.len();
    }
    if count == 0 {
        warn!("no ground truths for the refined images; skipping the mean IoU table");
        return Ok(());
    }
    let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let rows: Vec<Vec<String>> = (1..=iters)
        .map(|k| vec![k.to_string(), f(means[0]), f(means[k])])
        .collect();
    write_table(&out.join("mean_iou.csv"), &["iteration", "input_mean_iou", "mean_iou"], &rows)?;
    for r in &rows {
        info!("iteration {}: mean IoU {} (input {})", r[0], r[2], r[1]);
    }
    Ok(())
}

pub fn propose(cfg: &RunConfig, model_path: Option<&Path>, raw_seeds: bool, out: &Path) -> Result<(), CliError> {
    let model = match model_path {
        Some(p) if !raw_seeds => Some(load_model(p)?),
        _ => None,
    };
    let scenes = load_scenes(cfg)?;
    prepare_out_dir(out)?;
    record_config(cfg, out, "propose")?;
    let results = par_map(&scenes, cfg.workers, |s| {
        match &model {
            Some(m) => generate_proposals(m, s, &cfg.proposals),
            None => {
                let seeds = seed_grid(s.width, s.height, &cfg.proposals.grid)?;
                rank_boxes(&seeds, s.width, s.height, &cfg.proposals)
            }
        }
    });
    let mut groups = Vec::with_capacity(scenes.len());
    for (s, r) in scenes.iter().zip(results) {
        let mut items = r?;
        items.truncate(cfg.max_proposals);
        groups.push(ImageRecords {
            image_id: s.id.clone(),
            items,
        });
    }
    let path = out.join("proposals.csv");
    write_proposals(&path, &groups)?;
    info!("wrote proposals for {} image(s) to {}", groups.len(), path.display());
    Ok(())
}

fn parse_labelled(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let label = p.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (label, p)
        }
    }
}

pub fn eval(cfg: &RunConfig, proposal_args: &[String], out: &Path) -> Result<(), CliError> {
    let scenes = load_scenes(cfg)?;
    prepare_out_dir(out)?;
    record_config(cfg, out, "eval")?;
    let index = scene_index(&scenes);
    let mut labelled: Vec<(String, Vec<EvalRecord>)> = vec![];
    for arg in proposal_args {
        let (label, path) = parse_labelled(arg);
        let mut by_id: HashMap<String, Vec<BBox>> = HashMap::new();
        for g in read_proposals(&path)? {
            lookup(&index, &g.image_id, &path)?;
            by_id.insert(g.image_id, g.items.into_iter().map(|p| p.bbox).collect());
        }
        // Images without proposals count as misses.
        let records = scenes
            .iter()
            .filter(|s| !s.gts.is_empty())
            .map(|s| EvalRecord {
                image_id: s.id.clone(),
                proposals: by_id.remove(&s.id).unwrap_or_default(),
                gts: s.gts.clone(),
            })
            .collect();
        labelled.push((label, records));
    }

    let mut header = vec!["k".to_string()];
    header.extend(labelled.iter().map(|(l, _)| l.clone()));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    for &t in &cfg.eval.iou_thresholds {
        let curves: Vec<Vec<(usize, f64)>> = par_map(&labelled, cfg.workers, |(_, r)| recall_curve(r, t, &cfg.eval.k));
        let rows: Vec<Vec<String>> = cfg
            .eval
            .k
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let mut row = vec![k.to_string()];
                row.extend(curves.iter().map(|c| f(c[i].1)));
                row
            })
            .collect();
        write_table(&out.join(format!("recall_iou{t}.csv")), &header_refs, &rows)?;
        let series: Vec<Series> = labelled
            .iter()
            .zip(curves)
            .map(|((label, _), points)| Series {
                label: label.clone(),
                points,
            })
            .collect();
        write_recall_svg(&out.join(format!("recall_iou{t}.svg")), &format!("Recall at IoU > {t}"), &series)?;
    }
    let rows: Vec<Vec<String>> = labelled
        .iter()
        .map(|(label, r)| vec![label.clone(), f(corloc(r))])
        .collect();
    for r in &rows {
        info!("{}: CorLoc {}", r[0], r[1]);
    }
    write_table(&out.join("corloc.csv"), &["series", "corloc"], &rows)?;
    Ok(())
}

pub fn perturb(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scenes = load_scenes(cfg)?;
    prepare_out_dir(out)?;
    record_config(cfg, out, "perturb")?;
    let mut groups = vec![];
    for (k, s) in scenes.iter().enumerate() {
        let mut rng = worker_rng(cfg.seed(), k as u64);
        let mut items = vec![];
        for g in &s.gts {
            items.extend(generate_training_boxes(g, &cfg.sampler, &mut rng)?.boxes);
        }
        if !items.is_empty() {
            groups.push(ImageRecords {
                image_id: s.id.clone(),
                items,
            });
        }
    }
    write_boxes(&out.join("boxes.csv"), &groups)?;
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scenes = load_scenes(cfg)?;
    prepare_out_dir(out)?;
    record_config(cfg, out, "synth")?;
    write_scene_cache(&scenes, &out.join("scenes.bin"))?;
    Ok(())
}

fn table_as_markdown(path: &Path) -> Result<Option<String>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(boxreg::Error::from)?;
    let mut lines = text.lines();
    let Some(head) = lines.next() else {
        return Ok(None);
    };
    let cols = head.split(',').count();
    let mut md = format!("| {} |\n|{}\n", head.replace(',', " | "), " --- |".repeat(cols));
    for l in lines {
        let _ = writeln!(md, "| {} |", l.replace(',', " | "));
    }
    Ok(Some(md))
}

pub fn report(train_dir: Option<&Path>, refine_dir: Option<&Path>, eval_dir: Option<&Path>, out: &Path) -> Result<(), CliError> {
    if train_dir.is_none() && refine_dir.is_none() && eval_dir.is_none() {
        return Err(CliError::Usage("give at least one of --train-dir, --refine-dir, --eval-dir".into()));
    }
    prepare_out_dir(out)?;
    let mut md = String::from("# boxreg report\n\n");
    md.push_str(
        "Localization quality is reported as mean IoU between refined boxes and their best-matching \
         ground truth. It stands in for detection mAP, which would need a detector and a labelled \
         benchmark. Recall and CorLoc count a match only when IoU is strictly above the threshold.\n\n",
    );
    if let Some(d) = train_dir {
        md.push_str("## Training\n\n");
        match table_as_markdown(&d.join("train_log.csv"))? {
            Some(t) => md.push_str(&t),
            None => md.push_str("No training log found.\n"),
        }
        md.push('\n');
    }
    if let Some(d) = refine_dir {
        md.push_str("## Iterative refinement\n\n");
        match table_as_markdown(&d.join("mean_iou.csv"))? {
            Some(t) => md.push_str(&t),
            None => md.push_str("No mean IoU table found.\n"),
        }
        md.push('\n');
    }
    if let Some(d) = eval_dir {
        md.push_str("## Proposals\n\n");
        let mut names: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(boxreg::Error::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        names.sort();
        for p in names {
            if let Some(t) = table_as_markdown(&p)? {
                let _ = writeln!(md, "### {}\n", p.file_stem().unwrap_or_default().to_string_lossy());
                md.push_str(&t);
                md.push('\n');
            }
        }
    }
    let path = out.join("report.md");
    write_text(&path, &md)?;
    info!("report written to {}", path.display());
    Ok(())
}
