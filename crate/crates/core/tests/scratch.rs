//! Scratch experiment harness (ignored by default).

use gcepnet_core::detector::{evaluate_ser, train, DetectorConfig, DetectorKind, TrainConfig};
use gcepnet_core::gnn::GnnVariant;
use std::time::Instant;

#[test]
#[ignore]
fn timing_probe() {
    let cfg = DetectorConfig::new(4, 4, 1);
    let cons = gcepnet_core::Constellation::new(1).unwrap();
    let params = cfg.init_params(GnnVariant::Gcepnet).unwrap();
    let inst = gcepnet_core::model::sample_instance_seeded(4, 4, 1, 8.0, 1, &[0]).unwrap();
    // forward only
    let t0 = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        gcepnet_core::gcepnet_forward(&inst, &cons, &params, &cfg).unwrap();
    }
    let fwd_us = t0.elapsed().as_micros() as f64 / reps as f64;
    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        gcepnet_core::detector::sample_gradient(&inst, &cons, &params, &cfg, GnnVariant::Gcepnet)
            .unwrap();
    }
    let grad_us = t0.elapsed().as_micros() as f64 / reps as f64;
    // plain EP
    let t0 = Instant::now();
    for _ in 0..reps {
        gcepnet_core::ep::ep_detect(&inst, &cons, &cfg.ep_config()).unwrap();
    }
    let ep_us = t0.elapsed().as_micros() as f64 / reps as f64;
    eprintln!("N_t=4 T=9: forward {fwd_us:.0} us, fwd+bwd {grad_us:.0} us, plain EP {ep_us:.0} us");
}

#[test]
#[ignore]
fn desk_scale_experiment() {
    let tc = TrainConfig::desk_scale();
    let dc = DetectorConfig::new(4, 4, 1);
    let t0 = Instant::now();
    let out = train(&tc, &dc, GnnVariant::Gcepnet, None).unwrap();
    eprintln!("training took {:.1} s", t0.elapsed().as_secs_f64());
    for r in out.history() {
        eprintln!(
            "epoch {:3}  train {:.4}  val_loss {:.4}  val_ser {:.5}  lr {:.1e}",
            r.epoch, r.train_loss, r.val_loss, r.val_mean_ser, r.lr
        );
    }
    eprintln!("best epoch {} val_ser {:.6}", out.state.best_epoch, out.state.best_val_ser);
    let snrs = [4.0, 8.0, 12.0];
    let samples = 20_000;
    let t0 = Instant::now();
    let ep_rows = evaluate_ser(DetectorKind::Ep, None, &dc, &snrs, samples, 777).unwrap();
    let gc_rows =
        evaluate_ser(DetectorKind::Gcepnet, Some(out.best_params()), &dc, &snrs, samples, 777)
            .unwrap();
    eprintln!("eval took {:.1} s", t0.elapsed().as_secs_f64());
    for (e, g) in ep_rows.iter().zip(&gc_rows) {
        let n_sym = (samples * dc.dim()) as f64;
        let sigma = (e.ser * (1.0 - e.ser) / n_sym).sqrt();
        eprintln!(
            "snr {:4}: EP {:.5} ({} errs)  GCEPNET {:.5} ({} errs)  diff/sigma {:.2}",
            e.snr_db,
            e.ser,
            e.symbol_errors,
            g.ser,
            g.symbol_errors,
            (e.ser - g.ser) / sigma.max(1e-12)
        );
    }
}
