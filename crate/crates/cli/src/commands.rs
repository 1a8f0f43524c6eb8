use std::path::PathBuf;

use cfam_core::compat::{CompatConfig, CompatModel};
use cfam_core::data::{Dataset, ItemId, ItemSet, Split};
use cfam_core::eval::{evaluate, recommend_approx, recommend_exact, CandidateIndex, RankedList};
use cfam_core::gan::{omega_c_full, train_mrcgan, Condition, GanData, GanModel};
use cfam_core::io::{
    image_grid, load_compat, load_gan, read_csv, save_compat, save_gan, write_csv, write_pgm, CompatCheckpoint,
    MetricsRow, RankingRow,
};
use cfam_core::train::{train_compat, EpochRecord, Resume, TrainData};
use cfam_core::{derive_seed, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{load_dataset, make_items, write_dataset};
use crate::error::CliError;
use crate::{Cli, Command, ModelArgs, ModelFlags};

pub const BEST: &str = "compat.best";
pub const LAST: &str = "compat.last";
pub const HISTORY: &str = "history.csv";
pub const METRICS: &str = "metrics.csv";
pub const GAN: &str = "gan.ckpt";
pub const GAN_CURVE: &str = "gan-curve.csv";
pub const GAN_GRID: &str = "gan-samples.pgm";

struct Ctx {
    run: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn data_dir(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned().unwrap_or_else(|| self.run.data.dir.clone())
    }

    fn create_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut run = RunConfig::load(cli.config.as_deref())?;
    run.apply_seed(cli.seed);
    let out = run.out_dir(cli.out.as_deref());
    let ctx = Ctx { run, out };
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Train(a) => train(ctx, &a),
        Command::Eval(a) => eval(&ctx, &a),
        Command::Recommend(a) => recommend(&ctx, &a),
        Command::TrainGan(a) => train_gan(ctx, &a),
        Command::Sample(a) => sample(&ctx, &a),
    }
}

fn gen_data(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.run.data;
    let (items, relation) = make_items(c, derive_seed(ctx.run.seed, 0))?;
    let ratios = (c.ratios[0], c.ratios[1], c.ratios[2]);
    let ds = Dataset::from_items(&items, &relation, ratios, c.pairs_per_item, ctx.run.seed)?;
    write_dataset(&ctx.out, &ds)?;
    for (i, split) in Split::ALL.into_iter().enumerate() {
        println!(
            "split={split} items={} pairs={} positive_fraction={:.4}",
            ds.items[i].len(),
            ds.pairs[i].len(),
            ds.pairs[i].positive_fraction()
        );
    }
    println!("wrote {}", ctx.out.display());
    Ok(())
}

fn apply_model_flags(ctx: &mut Ctx, flags: &ModelFlags) {
    let m = &mut ctx.run.model;
    if let Some(v) = flags.mode {
        m.mode = v;
    }
    if let Some(v) = flags.k {
        m.k = v;
    }
    if let Some(v) = flags.n {
        m.n = v;
    }
    if let Some(v) = flags.lambda_m {
        m.lambda_m = v;
    }
}

/// Rejects a checkpoint whose sizes disagree with explicitly requested ones.
fn check_expected(flags: &ModelFlags, config: &CompatConfig) -> Result<(), CliError> {
    let mut diffs = Vec::new();
    if flags.mode.is_some_and(|m| m != config.mode) {
        diffs.push(format!("mode {} (requested {})", config.mode, flags.mode.unwrap()));
    }
    if flags.k.is_some_and(|k| k != config.k) {
        diffs.push(format!("K={} (requested {})", config.k, flags.k.unwrap()));
    }
    if flags.n.is_some_and(|n| n != config.n) {
        diffs.push(format!("N={} (requested {})", config.n, flags.n.unwrap()));
    }
    if flags.lambda_m.is_some_and(|l| l != config.lambda_m) {
        diffs.push(format!(
            "lambda_m={} (requested {})",
            config.lambda_m,
            flags.lambda_m.unwrap()
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(format!("checkpoint has {}", diffs.join(", "))).into())
    }
}

fn check_items(model: &CompatModel<f64>, items: &ItemSet) -> Result<(), CliError> {
    if model.config().image != items.shape() {
        return Err(Error::Mismatch(format!(
            "model expects {:?} items, dataset has {:?}",
            model.config().image,
            items.shape()
        ))
        .into());
    }
    Ok(())
}

fn train(mut ctx: Ctx, args: &crate::TrainArgs) -> Result<(), CliError> {
    if let Some(e) = args.epochs {
        ctx.run.train.epochs = e;
    }
    let ds = load_dataset(&ctx.data_dir(args.data.data.as_ref()))?;
    let history_path = ctx.path(HISTORY);
    let (model, resume, mut history) = match &args.resume {
        Some(path) => {
            let ck = load_compat::<f64>(path)?;
            check_expected(&args.model, ck.model.config())?;
            let adam = ck.adam.ok_or_else(|| {
                Error::Checkpoint(format!("{} has no optimizer state; resume from {LAST}", path.display()))
            })?;
            let mut history: Vec<EpochRecord> = if history_path.exists() {
                read_csv(&history_path)?
            } else {
                Vec::new()
            };
            history.retain(|h| h.epoch <= ck.epochs_done);
            let resume = Resume {
                adam,
                epochs_done: ck.epochs_done,
                best: ck.best,
            };
            (ck.model, Some(resume), history)
        }
        None => {
            apply_model_flags(&mut ctx, &args.model);
            let config = ctx.run.model.compat(ds.items[0].shape());
            (CompatModel::<f64>::new(config, ctx.run.seed)?, None, Vec::new())
        }
    };
    check_items(&model, &ds.items[0])?;
    let resumed = resume.is_some();
    let data = TrainData {
        train_items: &ds.items[0],
        train_pairs: &ds.pairs[0],
        val_items: &ds.items[1],
        val_pairs: &ds.pairs[1],
        weights: None,
    };
    let outcome = train_compat(model, &data, &ctx.run.train, resume)?;
    if outcome.diverged {
        eprintln!(
            "warning: training diverged after epoch {}; kept the last finite state",
            outcome.epochs_done
        );
    }
    history.extend_from_slice(&outcome.history);
    ctx.create_out()?;
    write_csv(&history_path, &history)?;
    let best = outcome.best_val_loss.zip(outcome.best_epoch);
    if outcome.improved || !resumed {
        save_compat(
            &ctx.path(BEST),
            &CompatCheckpoint {
                model: outcome.best.clone(),
                epochs_done: outcome.best_epoch.unwrap_or(0),
                best,
                adam: None,
            },
        )?;
    }
    save_compat(
        &ctx.path(LAST),
        &CompatCheckpoint {
            model: outcome.last.clone(),
            epochs_done: outcome.epochs_done,
            best,
            adam: Some(outcome.adam.clone()),
        },
    )?;
    match best {
        Some((loss, epoch)) => {
            let auc = history
                .iter()
                .find(|h| h.epoch == epoch)
                .map_or(f64::NAN, |h| h.val_auc);
            println!("best_epoch={epoch} best_val_loss={loss:.6} best_val_auc={auc:.6}");
        }
        None => println!("best_epoch=none best_val_auc=nan"),
    }
    Ok(())
}

fn load_model(ctx: &Ctx, args: &ModelArgs) -> Result<CompatModel<f64>, CliError> {
    let path = args.model.clone().unwrap_or_else(|| ctx.path(BEST));
    let ck = load_compat::<f64>(&path)?;
    check_expected(&args.expect, ck.model.config())?;
    Ok(ck.model)
}

fn eval(ctx: &Ctx, args: &ModelArgs) -> Result<(), CliError> {
    let ds = load_dataset(&ctx.data_dir(args.data.data.as_ref()))?;
    let model = load_model(ctx, args)?;
    check_items(&model, &ds.items[0])?;
    let mut rows = Vec::with_capacity(3);
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let r = evaluate(&model, &ds.items[i], &ds.pairs[i].pairs)?;
        println!(
            "split={split} pairs={} auc={:.6} error_rate={:.6} auc_min_dk={:.6}",
            r.pairs, r.auc, r.error_rate, r.auc_min_dk
        );
        rows.push(MetricsRow {
            split: split.to_string(),
            pairs: r.pairs,
            auc: r.auc,
            error_rate: r.error_rate,
            auc_min_dk: r.auc_min_dk,
        });
    }
    ctx.create_out()?;
    write_csv(&ctx.path(METRICS), &rows)?;
    println!("auc={:.6}", rows[2].auc);
    Ok(())
}

fn ranking_rows(list: &RankedList) -> impl Iterator<Item = RankingRow> + '_ {
    list.entries.iter().enumerate().map(|(r, e)| RankingRow {
        query_id: list.query,
        rank: r + 1,
        candidate_id: e.id,
        score: e.score,
    })
}

fn recommend(ctx: &Ctx, args: &crate::RecommendArgs) -> Result<(), CliError> {
    let ds = load_dataset(&ctx.data_dir(args.common.data.data.as_ref()))?;
    let model = load_model(ctx, &args.common)?;
    let (items, _) = ds.split(Split::Test);
    check_items(&model, items)?;
    let top_n = args.top_n.unwrap_or(ctx.run.eval.top_n);
    if top_n == 0 {
        return Err(CliError::Usage("--top-n must be positive".into()));
    }
    let families = model.encode_items(items)?;
    let index = CandidateIndex::new(items.ids().to_vec(), &families)?;
    let queries = args
        .queries
        .or(ctx.run.eval.queries)
        .unwrap_or(items.len())
        .min(items.len());
    let mut rows = Vec::new();
    let mut agree = 0;
    for (id, fam) in items.ids().iter().zip(&families).take(queries) {
        if args.approx {
            let approx = recommend_approx(*id, fam, &index, top_n)?;
            let exact = recommend_exact(*id, fam, &index, 1)?;
            agree += usize::from(approx.top() == exact.top());
            rows.extend(ranking_rows(&approx));
        } else {
            rows.extend(ranking_rows(&recommend_exact(*id, fam, &index, top_n)?));
        }
    }
    let mode = if args.approx { "approx" } else { "exact" };
    ctx.create_out()?;
    write_csv(&ctx.path(&format!("rankings-{mode}.csv")), &rows)?;
    println!("mode={mode} queries={queries} top_n={top_n}");
    if args.approx && queries > 0 {
        println!("top1_agreement={:.6}", agree as f64 / queries as f64);
    }
    Ok(())
}

fn train_gan(mut ctx: Ctx, args: &crate::GanArgs) -> Result<(), CliError> {
    if let Some(s) = args.steps {
        ctx.run.gan.steps = s;
    }
    let ds = load_dataset(&ctx.data_dir(args.common.data.data.as_ref()))?;
    let compat = load_model(&ctx, &args.common)?;
    check_items(&compat, &ds.items[0])?;
    let (items, pairs) = ds.split(Split::Train);
    let spec = GanModel::spec_for(&ctx.run.gan, &compat, items, pairs)?;
    let gan = GanModel::<f64>::new(ctx.run.gan.clone(), spec)?;
    let data = GanData::new(&compat, items, pairs)?;
    let omega_start = omega_c_full(&gan, &data)?;
    let outcome = train_mrcgan(gan, &data)?;
    if outcome.diverged {
        eprintln!("warning: GAN training diverged after step {}", outcome.steps_done);
    }
    let omega_end = omega_c_full(&outcome.model, &data)?;
    ctx.create_out()?;
    save_gan(&ctx.path(GAN), &outcome.model, outcome.steps_done)?;
    write_csv(&ctx.path(GAN_CURVE), &outcome.curve)?;

    // One row per query, one column per prototype.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.run.seed, 0x5a));
    let (test, _) = ds.split(Split::Test);
    let k = outcome.model.spec.prototypes;
    let mut images = Vec::new();
    for fam in compat.encode_items(test)?.iter().take(4) {
        for j in 1..=k {
            images.push(
                outcome
                    .model
                    .sample_compatible(fam, Condition::Prototype(j), 1, &mut rng)?
                    .into_data(),
            );
        }
    }
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let (shape, grid) = image_grid(&refs, test.shape(), k, 1)?;
    write_pgm(&ctx.path(GAN_GRID), shape, &grid)?;
    println!(
        "steps={} m_enc={:.6} m_prj={:.6} omega_c_initial={omega_start:.6} omega_c_final={omega_end:.6}",
        outcome.steps_done, outcome.model.spec.m_enc, outcome.model.spec.m_prj
    );
    Ok(())
}

fn find_query(ds: &Dataset, id: Option<ItemId>) -> Result<(ItemId, &[f64]), CliError> {
    let (test, _) = ds.split(Split::Test);
    match id {
        None => {
            let id = *test
                .ids()
                .first()
                .ok_or_else(|| Error::Data("test split is empty".into()))?;
            Ok((id, test.image_by_id(id).expect("own id")))
        }
        Some(id) => ds
            .items
            .iter()
            .find_map(|s| s.image_by_id(id))
            .map(|img| (id, img))
            .ok_or_else(|| Error::Data(format!("no item with id {id}")).into()),
    }
}

fn sample(ctx: &Ctx, args: &crate::SampleArgs) -> Result<(), CliError> {
    let ds = load_dataset(&ctx.data_dir(args.common.data.data.as_ref()))?;
    let compat = load_model(ctx, &args.common)?;
    check_items(&compat, &ds.items[0])?;
    let gan_path = args.gan.clone().unwrap_or_else(|| ctx.path(GAN));
    let (gan, _) = load_gan::<f64>(&gan_path)?;
    let c = compat.config();
    if gan.spec.cond_dim != c.embed_dim() || gan.spec.prototypes != c.prototypes() || gan.spec.image != c.image {
        return Err(Error::Mismatch(format!(
            "generator was trained for K={} N={} but the model has K={} N={}",
            gan.spec.prototypes,
            gan.spec.cond_dim,
            c.prototypes(),
            c.embed_dim()
        ))
        .into());
    }
    let condition = match (args.style, args.prototype) {
        (true, _) => Condition::Style,
        (false, Some(k)) if (1..=gan.spec.prototypes).contains(&k) => Condition::Prototype(k),
        (false, Some(k)) => {
            return Err(CliError::Usage(format!(
                "--prototype {k} outside 1..={}",
                gan.spec.prototypes
            )));
        }
        (false, None) => return Err(CliError::Usage("pass --prototype K or --style".into())),
    };
    let count = args.count.unwrap_or(ctx.run.eval.samples);
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let (query, image) = find_query(&ds, args.query)?;
    let family = compat.encode_family(image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.run.seed, u64::from(query)));
    let out = gan.sample_compatible(&family, condition, count, &mut rng)?;
    ctx.create_out()?;
    let tag = match condition {
        Condition::Style => "style".to_string(),
        Condition::Prototype(k) => format!("p{k}"),
    };
    for (i, row) in out.rows().enumerate() {
        write_pgm(&ctx.path(&format!("sample-{query}-{tag}-{i}.pgm")), gan.spec.image, row)?;
    }
    let refs: Vec<&[f64]> = out.rows().collect();
    let (shape, grid) = image_grid(&refs, gan.spec.image, count.min(8), 1)?;
    write_pgm(&ctx.path(&format!("sample-{query}-{tag}-grid.pgm")), shape, &grid)?;
    println!("query={query} condition={tag} samples={count}");
    Ok(())
}
