//! File formats produced by the CLI: commented CSV, parameter checkpoints,
//! and the training-state document used for exact resume.

use gcepnet_core::detector::{EpochRecord, TrainState};
use gcepnet_core::linalg::Matrix;
use gcepnet_core::optim::AdamState;
use gcepnet_core::params::{read_checkpoint, write_checkpoint, ParameterSet};
use std::fmt::Write as _;
use std::path::Path;

/// CSV document with `# key = value` provenance comments above the header.
pub struct CsvDoc {
    pub comments: Vec<(String, String)>,
    pub header: String,
    pub rows: Vec<String>,
}

impl CsvDoc {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.comments {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "{}", self.header);
        for row in &self.rows {
            let _ = writeln!(out, "{row}");
        }
        out
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut comments = Vec::new();
        let mut header = None;
        let mut rows = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                match rest.split_once(" = ") {
                    Some((k, v)) => comments.push((k.to_string(), v.to_string())),
                    None => return Err(format!("bad comment line {line:?}")),
                }
            } else if header.is_none() {
                header = Some(line.to_string());
            } else {
                rows.push(line.to_string());
            }
        }
        Ok(CsvDoc {
            comments,
            header: header.ok_or("missing CSV header")?,
            rows,
        })
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

/// Parameter checkpoint with a hyperparameter block.
pub fn save_params(
    path: &Path,
    hyper: &[(String, String)],
    params: &ParameterSet,
) -> Result<(), String> {
    write_text(path, &write_checkpoint(hyper, params))
}

pub fn load_params(path: &Path) -> Result<(Vec<(String, String)>, ParameterSet), String> {
    let text = read_text(path)?;
    read_checkpoint(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

/// Serialize the full training state (parameters, optimizer moments,
/// scheduler, history) for exact resume. Reuses the checkpoint container:
/// parameters are stored four times under `current.`/`best.`/`adam_m.`/
/// `adam_v.` prefixes, scalars and history rows ride in the hyper block.
pub fn save_train_state(
    path: &Path,
    hyper: &[(String, String)],
    state: &TrainState,
) -> Result<(), String> {
    let mut entries: Vec<(String, String)> = hyper.to_vec();
    entries.push(("adam_step".into(), state.adam.step.to_string()));
    entries.push(("adam_lr".into(), fmt_f64(state.adam.lr)));
    entries.push((
        "sched_best".into(),
        state.sched_best.map_or("none".to_string(), fmt_f64),
    ));
    entries.push(("sched_bad".into(), state.sched_bad.to_string()));
    entries.push(("epochs_done".into(), state.epochs_done.to_string()));
    entries.push(("best_epoch".into(), state.best_epoch.to_string()));
    entries.push(("best_val_ser".into(), fmt_f64(state.best_val_ser)));
    for (i, r) in state.history.iter().enumerate() {
        entries.push((
            format!("history_{i}"),
            format!(
                "{} {} {} {} {}",
                r.epoch,
                fmt_f64(r.train_loss),
                fmt_f64(r.val_loss),
                fmt_f64(r.val_mean_ser),
                fmt_f64(r.lr)
            ),
        ));
    }
    let mut combined = ParameterSet::new();
    let mut add_all = |prefix: &str, source: &ParameterSet| -> Result<(), String> {
        for p in source.iter() {
            combined
                .insert(&format!("{prefix}.{}", p.name), p.value.clone(), true)
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    add_all("current", &state.params)?;
    add_all("best", &state.best_params)?;
    let mut add_moments = |prefix: &str, moments: &[Matrix]| -> Result<(), String> {
        for (p, m) in state.params.iter().zip(moments) {
            combined
                .insert(&format!("{prefix}.{}", p.name), m.clone(), true)
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    };
    add_moments("adam_m", &state.adam.m)?;
    add_moments("adam_v", &state.adam.v)?;
    save_params(path, &entries, &combined)
}

fn strip_prefix_set(
    combined: &ParameterSet,
    prefix: &str,
    order: &ParameterSet,
) -> Result<ParameterSet, String> {
    let mut out = ParameterSet::new();
    for p in order.iter() {
        let key = format!("{prefix}.{}", p.name);
        let found = combined.get(&key).map_err(|e| e.to_string())?;
        out.insert(&p.name, found.value.clone(), true).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn hyper_value<'a>(hyper: &'a [(String, String)], key: &str) -> Result<&'a str, String> {
    hyper
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| format!("training state is missing {key:?}"))
}

/// Load a training state saved by [`save_train_state`]. `template` supplies
/// the parameter names/shapes the state must contain.
pub fn load_train_state(
    path: &Path,
    template: &ParameterSet,
) -> Result<(Vec<(String, String)>, TrainState), String> {
    let (hyper, combined) = load_params(path)?;
    let params = strip_prefix_set(&combined, "current", template)?;
    let best_params = strip_prefix_set(&combined, "best", template)?;
    let m_set = strip_prefix_set(&combined, "adam_m", template)?;
    let v_set = strip_prefix_set(&combined, "adam_v", template)?;
    let lr: f64 = hyper_value(&hyper, "adam_lr")?
        .parse()
        .map_err(|_| "bad adam_lr".to_string())?;
    let mut adam = AdamState::new(&params, lr);
    adam.step = hyper_value(&hyper, "adam_step")?
        .parse()
        .map_err(|_| "bad adam_step".to_string())?;
    adam.m = m_set.iter().map(|p| p.value.clone()).collect();
    adam.v = v_set.iter().map(|p| p.value.clone()).collect();
    let sched_best = match hyper_value(&hyper, "sched_best")? {
        "none" => None,
        v => Some(v.parse::<f64>().map_err(|_| "bad sched_best".to_string())?),
    };
    let sched_bad: usize = hyper_value(&hyper, "sched_bad")?
        .parse()
        .map_err(|_| "bad sched_bad".to_string())?;
    let epochs_done: usize = hyper_value(&hyper, "epochs_done")?
        .parse()
        .map_err(|_| "bad epochs_done".to_string())?;
    let best_epoch: usize = hyper_value(&hyper, "best_epoch")?
        .parse()
        .map_err(|_| "bad best_epoch".to_string())?;
    let best_val_ser: f64 = hyper_value(&hyper, "best_val_ser")?
        .parse()
        .map_err(|_| "bad best_val_ser".to_string())?;
    let mut history = Vec::new();
    let mut i = 0;
    while let Ok(line) = hyper_value(&hyper, &format!("history_{i}")) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(format!("bad history row {line:?}"));
        }
        history.push(EpochRecord {
            epoch: parts[0].parse().map_err(|_| "bad history epoch".to_string())?,
            train_loss: parts[1].parse().map_err(|_| "bad history loss".to_string())?,
            val_loss: parts[2].parse().map_err(|_| "bad history loss".to_string())?,
            val_mean_ser: parts[3].parse().map_err(|_| "bad history ser".to_string())?,
            lr: parts[4].parse().map_err(|_| "bad history lr".to_string())?,
        });
        i += 1;
    }
    Ok((
        hyper,
        TrainState {
            params,
            adam,
            sched_best,
            sched_bad,
            epochs_done,
            best_params,
            best_epoch,
            best_val_ser,
            history,
        },
    ))
}

pub fn history_csv(comments: &[(String, String)], history: &[EpochRecord]) -> String {
    let rows = history
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_mean_ser, r.lr
            )
        })
        .collect();
    CsvDoc {
        comments: comments.to_vec(),
        header: "epoch,train_loss,val_loss,val_mean_ser,lr".to_string(),
        rows,
    }
    .render()
}
