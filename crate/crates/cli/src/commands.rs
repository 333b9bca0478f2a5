//! Subcommand implementations.

use std::path::{Path, PathBuf};

use aupt_core::ablation::{default_grid, run_ablation, AblationAxis, AblationPlan, GridPoint};
use aupt_core::batch::ImageStore;
use aupt_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use aupt_core::manifest::{load_manifest, LabelKind};
use aupt_core::metrics::{build_report, MetricsReport, Provenance, ScoreMatrix};
use aupt_core::network::build_vgg13;
use aupt_core::splits::subject_kfold;
use aupt_core::synth::{generate_dataset, SynthSpec};
use aupt_core::trainer::{evaluate_model, finetune_subset, pretrain, TrainConfig};

use crate::config::{apply_train_keys, CliResult, Effective, KvConfig};

/// Resolve a user path against AUPT_DATA_ROOT when it is relative.
pub fn resolve_path(p: &Path) -> PathBuf {
    if p.is_relative() {
        if let Ok(root) = std::env::var("AUPT_DATA_ROOT") {
            return Path::new(&root).join(p);
        }
    }
    p.to_path_buf()
}

/// Write through a temp file + rename so partial outputs never land under
/// the final name.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp-partial");
    std::fs::write(&tmp, contents).map_err(|e| format!("write {}: {e}", tmp.display()))?;
    std::fs::rename(&tmp, path).map_err(|e| format!("rename to {}: {e}", path.display()))?;
    Ok(())
}

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| format!("create {}: {e}", dir.display()))
}

fn core_err(e: aupt_core::Error) -> String {
    e.to_string()
}

fn echo_config(text: &str, hash: &str, out_dir: &Path) -> CliResult<()> {
    print!("{text}");
    println!("config_hash = {hash}");
    write_atomic(&out_dir.join("effective.cfg"), format!("{text}config_hash = {hash}\n").as_bytes())
}

fn load_kind(raw: &str) -> CliResult<LabelKind> {
    match raw {
        "binary" => Ok(LabelKind::Binary),
        "intensity" => Ok(LabelKind::Intensity),
        other => Err(format!("label kind must be binary|intensity, got {other}")),
    }
}

pub struct SynthOpts {
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub subjects: Option<usize>,
    pub images_per_subject: Option<usize>,
    pub labels: Option<usize>,
    pub noise: Option<f64>,
    pub image_size: Option<usize>,
    pub seed: Option<u64>,
}

pub fn cmd_synth(opts: SynthOpts) -> CliResult<()> {
    let mut spec = SynthSpec {
        n_subjects: 430,
        images_per_subject: 20,
        n_labels: 17,
        label_noise_rate: 0.2,
        image_size: 64,
        seed: 0,
    };
    let mut kv = match &opts.config {
        Some(p) => KvConfig::from_file(p)?,
        None => KvConfig::empty(),
    };
    kv.take("subjects", &mut spec.n_subjects)?;
    kv.take("images_per_subject", &mut spec.images_per_subject)?;
    kv.take("labels", &mut spec.n_labels)?;
    kv.take("noise", &mut spec.label_noise_rate)?;
    kv.take("image_size", &mut spec.image_size)?;
    kv.take("seed", &mut spec.seed)?;
    kv.finish()?;
    if let Some(v) = opts.subjects {
        spec.n_subjects = v;
    }
    if let Some(v) = opts.images_per_subject {
        spec.images_per_subject = v;
    }
    if let Some(v) = opts.labels {
        spec.n_labels = v;
    }
    if let Some(v) = opts.noise {
        spec.label_noise_rate = v;
    }
    if let Some(v) = opts.image_size {
        spec.image_size = v;
    }
    if let Some(v) = opts.seed {
        spec.seed = v;
    }

    prepare_out_dir(&opts.out_dir)?;
    let mut eff = Effective::new("synth");
    eff.set("subjects", spec.n_subjects)
        .set("images_per_subject", spec.images_per_subject)
        .set("labels", spec.n_labels)
        .set("noise", spec.label_noise_rate)
        .set("image_size", spec.image_size)
        .set("seed", spec.seed)
        .set("out_dir", opts.out_dir.display());
    let (text, hash) = eff.seal();
    echo_config(&text, &hash, &opts.out_dir)?;

    let out = generate_dataset(&spec, &opts.out_dir).map_err(core_err)?;
    println!(
        "wrote {} images for {} subjects: {} (noisy labels), {} (true labels)",
        out.manifest.len(),
        out.manifest.subjects().len(),
        out.manifest_path.display(),
        out.truth_path.display()
    );
    Ok(())
}

pub struct TrainOpts {
    pub manifest: PathBuf,
    pub label_kind: String,
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub channels: usize,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
}

fn train_config_from(opts_config: &Option<PathBuf>, base: TrainConfig, opts: &TrainOpts) -> CliResult<TrainConfig> {
    let mut train = base;
    let mut kv = match opts_config {
        Some(p) => KvConfig::from_file(p)?,
        None => KvConfig::empty(),
    };
    apply_train_keys(&mut kv, &mut train)?;
    kv.finish()?;
    if let Some(v) = opts.seed {
        train.seed = v;
    }
    if let Some(v) = opts.lr {
        train.lr = v;
    }
    if let Some(v) = opts.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = opts.max_epochs {
        train.max_epochs = v;
    }
    Ok(train)
}

pub fn cmd_pretrain(opts: TrainOpts) -> CliResult<()> {
    let manifest_path = resolve_path(&opts.manifest);
    let manifest = load_manifest(&manifest_path, load_kind(&opts.label_kind)?).map_err(core_err)?;
    let train = train_config_from(&opts.config, TrainConfig::pretrain_defaults(), &opts)?;

    prepare_out_dir(&opts.out_dir)?;
    let mut eff = Effective::new("pretrain");
    eff.set("manifest", manifest_path.display())
        .set("label_kind", &opts.label_kind)
        .set("channels", opts.channels)
        .set_train(&train);
    let (text, hash) = eff.seal();
    echo_config(&text, &hash, &opts.out_dir)?;

    println!(
        "pre-training on {} rows / {} subjects / {} labels",
        manifest.len(),
        manifest.subjects().len(),
        manifest.label_width()
    );
    let store = ImageStore::<f32>::load(&manifest, opts.channels).map_err(core_err)?;
    let net = build_vgg13::<f32>(opts.channels, manifest.label_width(), train.seed).map_err(core_err)?;
    let history = pretrain(&net, &manifest, &store, &train).map_err(core_err)?;
    for e in &history.epochs {
        println!(
            "epoch {:3}  train {:.4}  val {}",
            e.epoch,
            e.train_loss,
            e.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    println!("stopped: {}", history.stop_reason.as_str());

    let meta = CheckpointMeta {
        config_hash: hash.clone(),
        seed: train.seed,
        epoch: history.epochs.len() as u32,
    };
    let ckpt_path = opts.out_dir.join("checkpoint.aupt");
    let tmp = ckpt_path.with_extension("tmp-partial");
    save_checkpoint(&net, &meta, None, &tmp).map_err(core_err)?;
    std::fs::rename(&tmp, &ckpt_path).map_err(|e| e.to_string())?;
    write_atomic(
        &opts.out_dir.join("history.log"),
        format!("# config_hash={hash}\n{}", history.render_log()).as_bytes(),
    )?;
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

pub struct FinetuneOpts {
    pub train: TrainOpts,
    pub from: Option<PathBuf>,
    pub folds: usize,
    pub fold_subset: Vec<usize>,
}

fn predictions_csv(matrix: &ScoreMatrix, fold: usize, hash: &str) -> String {
    let mut out = format!("# config_hash={hash}\n# fold={fold}\nsubject");
    for au in &matrix.au_names {
        out.push_str(&format!(",score:{au}"));
    }
    for au in &matrix.au_names {
        out.push_str(&format!(",label:{au}"));
    }
    out.push('\n');
    let l = matrix.au_names.len();
    for row in 0..matrix.n_rows() {
        out.push_str(&matrix.subjects[row]);
        for j in 0..l {
            // shortest roundtrip form, so reading the file back reproduces
            // the scores bit-exactly
            out.push_str(&format!(",{}", matrix.scores[row * l + j]));
        }
        for j in 0..l {
            out.push_str(&format!(",{}", matrix.labels[row * l + j]));
        }
        out.push('\n');
    }
    out
}

pub fn read_predictions(path: &Path) -> CliResult<(ScoreMatrix, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    let mut fold = 0usize;
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.peek() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                if k.trim() == "fold" {
                    fold = v.trim().parse().map_err(|e| format!("{}: fold: {e}", path.display()))?;
                }
            }
            lines.next();
        } else {
            break;
        }
    }
    let header = lines.next().ok_or_else(|| format!("{}: missing header", path.display()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let au_names: Vec<String> = cols
        .iter()
        .filter_map(|c| c.strip_prefix("score:").map(str::to_string))
        .collect();
    if cols.len() != 1 + 2 * au_names.len() || au_names.is_empty() {
        return Err(format!("{}: malformed predictions header", path.display()));
    }
    let l = au_names.len();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(format!("{}: row {}: wrong field count", path.display(), i + 1));
        }
        subjects.push(fields[0].to_string());
        for f in &fields[1..1 + l] {
            scores.push(f.parse::<f64>().map_err(|e| format!("{}: row {}: {e}", path.display(), i + 1))?);
        }
        for f in &fields[1 + l..] {
            labels.push(f.parse::<u8>().map_err(|e| format!("{}: row {}: {e}", path.display(), i + 1))?);
        }
    }
    Ok((ScoreMatrix { au_names, scores, labels, subjects }, fold))
}

fn write_report(report: &MetricsReport, out_dir: &Path) -> CliResult<()> {
    write_atomic(&out_dir.join("report.csv"), report.render_csv().as_bytes())?;
    let table = format!(
        "# config_hash={}\n{}\n",
        report.provenance.config_hash,
        report.render_table()
    );
    write_atomic(&out_dir.join("report.txt"), table.as_bytes())?;
    Ok(())
}

pub fn cmd_finetune(opts: FinetuneOpts) -> CliResult<()> {
    let manifest_path = resolve_path(&opts.train.manifest);
    let manifest = load_manifest(&manifest_path, load_kind(&opts.train.label_kind)?).map_err(core_err)?;
    let train = train_config_from(&opts.train.config, TrainConfig::finetune_defaults(), &opts.train)?;

    let from = opts.from.as_ref().ok_or("--from checkpoint is required")?;
    let loaded = load_checkpoint::<f32>(&resolve_path(from)).map_err(core_err)?;

    prepare_out_dir(&opts.train.out_dir)?;
    let mut eff = Effective::new("finetune");
    eff.set("manifest", manifest_path.display())
        .set("label_kind", &opts.train.label_kind)
        .set("from", from.display())
        .set("folds", opts.folds)
        .set(
            "fold_subset",
            if opts.fold_subset.is_empty() {
                "all".to_string()
            } else {
                opts.fold_subset.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
            },
        )
        .set("channels", opts.train.channels)
        .set_train(&train);
    let (text, hash) = eff.seal();
    echo_config(&text, &hash, &opts.train.out_dir)?;

    let store = ImageStore::<f32>::load(&manifest, loaded.network.in_channels()).map_err(core_err)?;
    let folds = subject_kfold(&manifest, opts.folds, train.seed).map_err(core_err)?;
    let fold_ids: Vec<usize> = if opts.fold_subset.is_empty() {
        (0..opts.folds).collect()
    } else {
        opts.fold_subset.clone()
    };

    println!(
        "fine-tuning {} folds over {} rows / {} subjects",
        fold_ids.len(),
        manifest.len(),
        manifest.subjects().len()
    );
    let runs = finetune_subset(&loaded.network, &manifest, &folds, &store, &train, &fold_ids).map_err(core_err)?;

    let mut matrices = Vec::new();
    for run in &runs {
        println!(
            "fold {}: {} epochs, stop={}, best val {:.4}",
            run.fold,
            run.history.epochs.len(),
            run.history.stop_reason.as_str(),
            run.history.best_val_loss.unwrap_or(f64::NAN)
        );
        let meta = CheckpointMeta {
            config_hash: hash.clone(),
            seed: train.seed,
            epoch: run.history.best_epoch.unwrap_or(0) as u32,
        };
        let ckpt = opts.train.out_dir.join(format!("fold{}_checkpoint.aupt", run.fold));
        let tmp = ckpt.with_extension("tmp-partial");
        save_checkpoint(&run.network, &meta, None, &tmp).map_err(core_err)?;
        std::fs::rename(&tmp, &ckpt).map_err(|e| e.to_string())?;
        write_atomic(
            &opts.train.out_dir.join(format!("fold{}_history.log", run.fold)),
            format!("# config_hash={hash}\n{}", run.history.render_log()).as_bytes(),
        )?;

        let matrix = evaluate_model(&run.network, &run.test_data, &store, train.batch_size).map_err(core_err)?;
        write_atomic(
            &opts.train.out_dir.join(format!("predictions_fold{}.csv", run.fold)),
            predictions_csv(&matrix, run.fold, &hash).as_bytes(),
        )?;
        matrices.push(matrix);
    }

    let report = build_report(
        &matrices,
        Provenance { fold_ids, config_hash: hash.clone(), seed: train.seed },
    )
    .map_err(core_err)?;
    write_report(&report, &opts.train.out_dir)?;
    println!("{}", report.render_table());
    Ok(())
}

pub struct EvalOpts {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub label_kind: String,
    pub out_dir: PathBuf,
    pub batch_size: usize,
}

pub fn cmd_eval(opts: EvalOpts) -> CliResult<()> {
    let manifest = load_manifest(resolve_path(&opts.manifest), load_kind(&opts.label_kind)?).map_err(core_err)?;
    let loaded = load_checkpoint::<f32>(&resolve_path(&opts.checkpoint)).map_err(core_err)?;
    prepare_out_dir(&opts.out_dir)?;

    let mut eff = Effective::new("eval");
    eff.set("checkpoint", opts.checkpoint.display())
        .set("manifest", opts.manifest.display())
        .set("label_kind", &opts.label_kind)
        .set("batch_size", opts.batch_size);
    let (text, hash) = eff.seal();
    echo_config(&text, &hash, &opts.out_dir)?;

    let store = ImageStore::<f32>::load(&manifest, loaded.network.in_channels()).map_err(core_err)?;
    let matrix = evaluate_model(&loaded.network, &manifest, &store, opts.batch_size).map_err(core_err)?;
    write_atomic(&opts.out_dir.join("predictions.csv"), predictions_csv(&matrix, 0, &hash).as_bytes())?;
    let report = build_report(
        &[matrix],
        Provenance { fold_ids: vec![0], config_hash: hash, seed: loaded.meta.seed },
    )
    .map_err(core_err)?;
    write_report(&report, &opts.out_dir)?;
    println!("{}", report.render_table());
    Ok(())
}

pub struct AblateOpts {
    pub axis: String,
    pub manifest: PathBuf,
    pub finetune_manifest: PathBuf,
    pub grid: Option<String>,
    pub seeds: String,
    pub folds: usize,
    pub fold_subset: Vec<usize>,
    pub channels: usize,
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
}

pub fn parse_grid(raw: &str) -> CliResult<Vec<GridPoint>> {
    raw.split(',')
        .map(|tok| {
            let tok = tok.trim();
            if tok.eq_ignore_ascii_case("all") {
                Ok(GridPoint::All)
            } else {
                tok.parse::<usize>()
                    .map(GridPoint::Count)
                    .map_err(|_| format!("grid entry {tok:?} is neither a count nor `all`"))
            }
        })
        .collect()
}

pub fn cmd_ablate(opts: AblateOpts) -> CliResult<()> {
    let axis = match opts.axis.as_str() {
        "images" => AblationAxis::Images,
        "subjects" => AblationAxis::Subjects,
        other => return Err(format!("--axis must be images|subjects, got {other}")),
    };
    let grid = match &opts.grid {
        Some(g) => parse_grid(g)?,
        None => default_grid(axis),
    };
    let seeds: Vec<u64> = opts
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("seed {s:?}: {e}")))
        .collect::<CliResult<Vec<u64>>>()?;

    let pool = load_manifest(resolve_path(&opts.manifest), LabelKind::Binary).map_err(core_err)?;
    let ft = load_manifest(resolve_path(&opts.finetune_manifest), LabelKind::Binary).map_err(core_err)?;

    let mut pretrain_cfg = TrainConfig::pretrain_defaults();
    let mut finetune_cfg = TrainConfig::finetune_defaults();
    if let Some(path) = &opts.config {
        let kv = KvConfig::from_file(path)?;
        let (mut pre_kv, mut ft_kv) = split_prefixed(kv)?;
        apply_train_keys(&mut pre_kv, &mut pretrain_cfg)?;
        pre_kv.finish()?;
        apply_train_keys(&mut ft_kv, &mut finetune_cfg)?;
        ft_kv.finish()?;
    }

    prepare_out_dir(&opts.out_dir)?;
    let mut eff = Effective::new("ablate");
    eff.set("axis", axis.as_str())
        .set("grid", grid.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(" "))
        .set("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
        .set("manifest", opts.manifest.display())
        .set("finetune_manifest", opts.finetune_manifest.display())
        .set("folds", opts.folds)
        .set("channels", opts.channels);
    for (prefix, cfg) in [("pretrain", &pretrain_cfg), ("finetune", &finetune_cfg)] {
        eff.set(&format!("{prefix}.lr"), cfg.lr)
            .set(&format!("{prefix}.batch_size"), cfg.batch_size)
            .set(&format!("{prefix}.max_epochs"), cfg.max_epochs);
    }
    let (text, hash) = eff.seal();
    echo_config(&text, &hash, &opts.out_dir)?;

    let store = {
        let mut combined = pool.clone();
        combined.records.extend(ft.records.iter().cloned());
        ImageStore::<f32>::load(&combined, opts.channels).map_err(core_err)?
    };

    let plan = AblationPlan {
        axis,
        grid: grid.clone(),
        seeds,
        pretrain_cfg,
        finetune_cfg,
        in_channels: opts.channels,
        finetune_folds: opts.folds,
        folds_to_run: opts.fold_subset.clone(),
    };
    let series = run_ablation(&pool, &ft, &store, &plan, |row| {
        println!(
            "axis={} point={} seed={} images={} subjects={} macro_f1={:.4}",
            row.axis.as_str(),
            row.point,
            row.seed,
            row.pretrain_images,
            row.pretrain_subjects,
            row.macro_f1
        );
    })
    .map_err(core_err)?;
    write_atomic(&opts.out_dir.join("series.csv"), series.render_csv(&hash).as_bytes())?;
    println!("series: {}", opts.out_dir.join("series.csv").display());
    Ok(())
}

/// Split `pretrain.*` / `finetune.*` keys into two sub-configs.
fn split_prefixed(kv: KvConfig) -> CliResult<(KvConfig, KvConfig)> {
    kv.split_by_prefixes("pretrain.", "finetune.")
}

pub struct ReportOpts {
    pub fixture: Option<PathBuf>,
    pub predictions: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn cmd_report(opts: ReportOpts) -> CliResult<()> {
    match (&opts.fixture, opts.predictions.is_empty()) {
        (Some(path), _) => render_fixture(path),
        (None, false) => {
            let mut matrices = Vec::new();
            let mut fold_ids = Vec::new();
            for p in &opts.predictions {
                let (m, fold) = read_predictions(&resolve_path(p))?;
                matrices.push(m);
                fold_ids.push(fold);
            }
            let report = build_report(
                &matrices,
                Provenance { fold_ids, config_hash: String::new(), seed: 0 },
            )
            .map_err(core_err)?;
            println!("{}", report.render_table());
            if let Some(dir) = &opts.out_dir {
                prepare_out_dir(dir)?;
                write_report(&report, dir)?;
            }
            Ok(())
        }
        (None, true) => Err("report needs --fixture or --predictions".into()),
    }
}

/// Render a per-AU F1 fixture table (paper-style percentages) with the row
/// mean recomputed into an Avg column.
fn render_fixture(path: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| format!("{}: empty fixture", path.display()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(format!("{}: fixture needs a label column plus values", path.display()));
    }

    let mut table: Vec<Vec<String>> = Vec::new();
    let mut out_header: Vec<String> = cols.iter().map(|s| s.to_string()).collect();
    out_header.push("Avg".into());
    table.push(out_header);

    for line in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(format!("{}: row {:?} does not match header", path.display(), fields.first()));
        }
        let values: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| format!("{}: {f:?}: {e}", path.display())))
            .collect::<CliResult<Vec<f64>>>()?;
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        let mut row: Vec<String> = vec![fields[0].to_string()];
        row.extend(fields[1..].iter().map(|s| s.to_string()));
        row.push(format!("{avg:.1}"));
        table.push(row);
    }

    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in &table {
        let line: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}")).collect();
        println!("{}", line.join("  "));
    }
    Ok(())
}

