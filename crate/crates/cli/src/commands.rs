//! Subcommand implementations.

use crate::config::{
    apply_detector_section, apply_train_section, detector_entries, load_file, parse_list_usize,
    parse_snr_grid, train_entries, FileConfig,
};
use crate::output::{
    history_csv, load_params, load_train_state, save_params, save_train_state, write_text, CsvDoc,
};
use crate::{
    BenchFlopsArgs, BenchTimeArgs, CliError, Command, DetectorFlags, EvalArgs, GenArgs, TrainArgs,
};
use gcepnet_core::detector::{
    check_params_match, evaluate_ser, network_forward_with_mode, train, DetectorConfig,
    DetectorKind, ReadoutMode, TrainConfig,
};
use gcepnet_core::ep::ep_detect;
use gcepnet_core::gnn::GnnVariant;
use gcepnet_core::model::{sample_instance, write_instance_batch, Constellation};
use gcepnet_core::params::ParameterSet;
use gcepnet_core::rng::{self, tag};
use gcepnet_core::{flop_count, flop_n2_coefficient};
use std::path::PathBuf;
use std::time::Instant;

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::BenchTime(args) => cmd_bench_time(args),
        Command::BenchFlops(args) => cmd_bench_flops(args),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn resolve_detector_config(
    file: &FileConfig,
    flags: &DetectorFlags,
) -> Result<DetectorConfig, CliError> {
    let n_t = flags.nt.or(file.detector.n_t).ok_or_else(|| usage("--nt is required"))?;
    let mut cfg = DetectorConfig::new(n_t, n_t, 2);
    apply_detector_section(&mut cfg, &file.detector);
    cfg.n_t = n_t;
    cfg.n_r = flags.nr.or(file.detector.n_r).unwrap_or(n_t);
    if let Some(v) = flags.qam {
        cfg.k = v;
    }
    if let Some(v) = flags.t {
        cfg.iterations = v;
    }
    if let Some(v) = flags.gnn_layers {
        cfg.gnn_layers = v;
    }
    if let Some(v) = flags.nu {
        cfg.n_u = v;
    }
    if let Some(v) = flags.nh1 {
        cfg.n_h1 = v;
    }
    if let Some(v) = flags.nh2 {
        cfg.n_h2 = v;
    }
    if let Some(v) = flags.m {
        cfg.cheb_order = v;
    }
    if let Some(v) = flags.damping {
        cfg.damping = v;
    }
    if let Some(v) = flags.variance_floor {
        cfg.variance_floor = v;
    }
    if let Some(v) = flags.detach_ep {
        cfg.detach_ep = v;
    }
    if let Some(v) = flags.share_layer_params {
        cfg.share_layer_params = v;
    }
    if let Some(v) = flags.shared_node_bias {
        cfg.shared_node_bias = v;
    }
    if let Some(v) = flags.init_seed {
        cfg.seed = v;
    }
    if !(1..=3).contains(&cfg.k) {
        return Err(usage(format!("--qam must be 1, 2 or 3, got {}", cfg.k)));
    }
    if cfg.iterations == 0 {
        return Err(usage("--t must be at least 1"));
    }
    if cfg.n_r < cfg.n_t {
        return Err(usage("--nr must be at least --nt (full column rank channel)"));
    }
    Ok(cfg)
}

fn load_config_file(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => load_file(p).map_err(usage),
        None => Ok(FileConfig::default()),
    }
}

fn log_config(cmd: &str, entries: &[(String, String)]) {
    let rendered: Vec<String> = entries.iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("[{cmd}] resolved config: {}", rendered.join(" "));
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let n_r = args.nr.unwrap_or(args.nt);
    let entries = vec![
        ("command".to_string(), "gen".to_string()),
        ("n_t".to_string(), args.nt.to_string()),
        ("n_r".to_string(), n_r.to_string()),
        ("k".to_string(), args.qam.to_string()),
        ("snr_db".to_string(), args.snr.to_string()),
        ("count".to_string(), args.count.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    log_config("gen", &entries);
    let mut instances = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let mut rng = rng::rng_from(args.seed, &[tag::GEN, i as u64]);
        instances.push(
            sample_instance(args.nt, n_r, args.qam, args.snr, &mut rng).map_err(CliError::from)?,
        );
    }
    let text = write_instance_batch(&instances, args.snr);
    write_text(&args.out, &text).map_err(runtime)?;
    eprintln!("[gen] wrote {} instances to {}", args.count, args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = load_config_file(&args.config)?;
    let dc = resolve_detector_config(&file, &args.shape)?;
    let variant = GnnVariant::parse(&args.variant)
        .ok_or_else(|| usage(format!("unknown variant {:?}", args.variant)))?;
    let mut tc = if args.paper_protocol {
        TrainConfig::paper_scale()
    } else {
        TrainConfig::desk_scale()
    };
    apply_train_section(&mut tc, &file.train);
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.iters_per_epoch {
        tc.iters_per_epoch = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.snr_lo {
        tc.snr_lo = v;
    }
    if let Some(v) = args.snr_hi {
        tc.snr_hi = v;
    }
    if let Some(spec) = &args.val_snrs {
        tc.val_snrs = crate::config::parse_list_f64(spec).map_err(usage)?;
    }
    if let Some(v) = args.val_samples {
        tc.val_samples_per_snr = v;
    }
    if let Some(v) = args.lr {
        tc.lr = v;
    }
    if let Some(v) = args.sched_factor {
        tc.sched_factor = v;
    }
    if let Some(v) = args.sched_patience {
        tc.sched_patience = v;
    }
    if let Some(v) = args.sched_period {
        tc.sched_period = v;
    }
    if let Some(v) = args.seed {
        tc.seed = v;
    }
    if tc.snr_lo > tc.snr_hi {
        return Err(usage("snr_lo must not exceed snr_hi"));
    }
    let mut entries = vec![
        ("command".to_string(), "train".to_string()),
        ("variant".to_string(), variant.name().to_string()),
    ];
    entries.extend(detector_entries(&dc));
    entries.extend(train_entries(&tc));
    log_config("train", &entries);

    let resume_state = match &args.resume {
        Some(path) => {
            let template = dc.init_params(variant).map_err(|e| runtime(e.to_string()))?;
            let (_, state) = load_train_state(path, &template).map_err(runtime)?;
            Some(state)
        }
        None => None,
    };
    let out = train(&tc, &dc, variant, resume_state).map_err(CliError::from)?;

    let ckpt_path = args.out.with_extension("ckpt");
    let history_path = args.out.with_extension("history.csv");
    let state_path = args.out.with_extension("state");
    save_params(&ckpt_path, &entries, out.best_params()).map_err(runtime)?;
    write_text(&history_path, &history_csv(&entries, out.history())).map_err(runtime)?;
    save_train_state(&state_path, &entries, &out.state).map_err(runtime)?;
    eprintln!(
        "[train] best epoch {} (validation mean SER {:.6}); wrote {}, {}, {}",
        out.state.best_epoch,
        out.state.best_val_ser,
        ckpt_path.display(),
        history_path.display(),
        state_path.display()
    );
    Ok(())
}

fn load_checkpoint_for(
    path: &Option<PathBuf>,
    dc: &DetectorConfig,
    variant: GnnVariant,
) -> Result<ParameterSet, CliError> {
    let path = path
        .as_ref()
        .ok_or_else(|| usage(format!("--checkpoint is required for {}", variant.name())))?;
    let (_, params) = load_params(path).map_err(runtime)?;
    check_params_match(&params, dc, variant).map_err(|e| runtime(e.to_string()))?;
    Ok(params)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = load_config_file(&args.config)?;
    let dc = resolve_detector_config(&file, &args.shape)?;
    let snrs = parse_snr_grid(&args.snr).map_err(usage)?;
    let kinds: Vec<DetectorKind> = args
        .detector
        .split(',')
        .map(|name| {
            DetectorKind::parse(name.trim())
                .ok_or_else(|| usage(format!("unknown detector {name:?}")))
        })
        .collect::<Result<_, _>>()?;
    let mut entries = vec![
        ("command".to_string(), "eval".to_string()),
        ("detectors".to_string(), args.detector.clone()),
        ("snr_grid".to_string(), args.snr.clone()),
        ("samples".to_string(), args.samples.to_string()),
        ("eval_seed".to_string(), args.seed.to_string()),
    ];
    entries.extend(detector_entries(&dc));
    log_config("eval", &entries);

    let mut rows = Vec::new();
    for kind in &kinds {
        let params = match kind.variant() {
            Some(variant) => Some(load_checkpoint_for(&args.checkpoint, &dc, variant)?),
            None => None,
        };
        let result = evaluate_ser(*kind, params.as_ref(), &dc, &snrs, args.samples, args.seed)
            .map_err(CliError::from)?;
        for r in result {
            rows.push(format!(
                "{},{},{},{},{}",
                r.snr_db, r.detector, r.samples, r.symbol_errors, r.ser
            ));
        }
    }
    let doc = CsvDoc {
        comments: entries.clone(),
        header: "snr_db,detector,samples,symbol_errors,ser".to_string(),
        rows,
    };
    write_text(&args.out, &doc.render()).map_err(runtime)?;
    eprintln!("[eval] wrote {}", args.out.display());

    if let Some(trace_path) = &args.trace {
        let cons = Constellation::new(dc.k).map_err(CliError::from)?;
        let mut trace_rows = Vec::new();
        for (si, &snr) in snrs.iter().enumerate() {
            let mut rng = rng::rng_from(args.seed, &[tag::EVALUATION, si as u64, 0]);
            let inst = sample_instance(dc.n_t, dc.n_r, dc.k, snr, &mut rng)
                .map_err(CliError::from)?;
            let run = ep_detect(&inst, &cons, &dc.ep_config())
                .map_err(|e| runtime(e.to_string()))?;
            for d in &run.diagnostics {
                trace_rows.push(format!(
                    "{},{},{},{},{},{},{}",
                    snr,
                    d.iteration,
                    d.theta_min,
                    d.theta_max,
                    d.skipped_updates,
                    d.invalid_cavities,
                    d.soft_ser
                ));
            }
        }
        let trace_doc = CsvDoc {
            comments: entries,
            header:
                "snr_db,iteration,theta_min,theta_max,skipped_updates,invalid_cavities,soft_ser"
                    .to_string(),
            rows: trace_rows,
        };
        write_text(trace_path, &trace_doc.render()).map_err(runtime)?;
        eprintln!("[eval] wrote EP trace {}", trace_path.display());
    }
    Ok(())
}

fn cmd_bench_time(args: BenchTimeArgs) -> Result<(), CliError> {
    let sizes = parse_list_usize(&args.sizes).map_err(usage)?;
    let kinds: Vec<DetectorKind> = args
        .detectors
        .split(',')
        .map(|name| {
            DetectorKind::parse(name.trim())
                .ok_or_else(|| usage(format!("unknown detector {name:?}")))
        })
        .collect::<Result<_, _>>()?;
    if kinds.contains(&DetectorKind::Ml) {
        return Err(usage("the exhaustive-search detector is not part of the timing benchmark"));
    }
    let entries = vec![
        ("command".to_string(), "bench-time".to_string()),
        ("sizes".to_string(), args.sizes.clone()),
        ("samples".to_string(), args.samples.to_string()),
        ("detectors".to_string(), args.detectors.clone()),
        ("t".to_string(), args.t.to_string()),
        ("k".to_string(), args.qam.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    log_config("bench-time", &entries);
    let snr_db = 20.0;
    let warmup = 2.min(args.samples);
    let mut rows = Vec::new();
    for &n_t in &sizes {
        let mut dc = DetectorConfig::new(n_t, n_t, args.qam);
        dc.iterations = args.t;
        dc.seed = args.seed;
        let cons = Constellation::new(dc.k).map_err(CliError::from)?;
        // pre-generate instances so only detection is timed
        let instances: Vec<_> = (0..args.samples)
            .map(|i| {
                let mut rng = rng::rng_from(args.seed, &[tag::BENCH, n_t as u64, i as u64]);
                sample_instance(dc.n_t, dc.n_r, dc.k, snr_db, &mut rng)
            })
            .collect::<Result<_, _>>()
            .map_err(CliError::from)?;
        for kind in &kinds {
            let params = kind
                .variant()
                .map(|variant| dc.init_params(variant))
                .transpose()
                .map_err(|e| runtime(e.to_string()))?;
            let detect = |inst: &gcepnet_core::RealInstance| -> Result<(), CliError> {
                match kind {
                    DetectorKind::Ep => {
                        ep_detect(inst, &cons, &dc.ep_config())
                            .map_err(|e| runtime(e.to_string()))?;
                    }
                    _ => {
                        network_forward_with_mode(
                            inst,
                            &cons,
                            params.as_ref().expect("learned detector has params"),
                            &dc,
                            kind.variant().expect("learned detector"),
                            ReadoutMode::Learned,
                        )
                        .map_err(CliError::from)?;
                    }
                }
                Ok(())
            };
            for inst in instances.iter().take(warmup) {
                detect(inst)?;
            }
            let t0 = Instant::now();
            for inst in &instances {
                detect(inst)?;
            }
            let total = t0.elapsed().as_secs_f64();
            let per_sample_us = total / args.samples as f64 * 1e6;
            rows.push(format!(
                "{},{},{},{},{}",
                kind.name(),
                n_t,
                args.samples,
                total,
                per_sample_us
            ));
            eprintln!(
                "[bench-time] {} at N_t={n_t}: {:.1} us/sample",
                kind.name(),
                per_sample_us
            );
        }
    }
    let doc = CsvDoc {
        comments: entries,
        header: "detector,n_t,samples,total_seconds,per_sample_us".to_string(),
        rows,
    };
    write_text(&args.out, &doc.render()).map_err(runtime)?;
    eprintln!("[bench-time] wrote {}", args.out.display());
    Ok(())
}

fn cmd_bench_flops(args: BenchFlopsArgs) -> Result<(), CliError> {
    let sizes = parse_list_usize(&args.sizes).map_err(usage)?;
    let (nu, nh1, nh2, m) = (args.nu, args.nh1, args.nh2, args.m);
    let c1_n2 = flop_n2_coefficient(GnnVariant::Gepnet, nu, nh1, nh2, m);
    let c2_n2 = flop_n2_coefficient(GnnVariant::Gcepnet, nu, nh1, nh2, m);
    println!("per-layer multiply counts at N_u={nu}, N_h1={nh1}, N_h2={nh2}, M={m}");
    println!("{:>6} {:>6} {:>16} {:>16} {:>8}", "n_t", "nodes", "pairwise", "chebyshev", "ratio");
    for &n_t in &sizes {
        let n = 2 * n_t as u64;
        let c1 = flop_count(GnnVariant::Gepnet, n, nu, nh1, nh2, m);
        let c2 = flop_count(GnnVariant::Gcepnet, n, nu, nh1, nh2, m);
        println!(
            "{:>6} {:>6} {:>16} {:>16} {:>8.1}",
            n_t,
            n,
            c1,
            c2,
            c1 as f64 / c2 as f64
        );
    }
    println!("quadratic coefficient (pairwise):  {c1_n2}");
    println!("quadratic coefficient (chebyshev): {c2_n2}");
    if c2_n2 < c1_n2 {
        let crossover = c1_n2 / nu;
        println!(
            "chebyshev wins the quadratic term for M < {crossover} (currently M = {m})"
        );
    } else {
        println!("pairwise aggregation has the smaller quadratic term at these settings");
    }
    Ok(())
}
