use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// Written after every evaluation epoch. `epoch` counts completed epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub score: Option<f64>,
    pub mean_return: Option<f64>,
    pub success_rate: Option<f64>,
    /// Running maximum of `score`.
    pub best_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss,grad_norm,clipped_grad_norm\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{},{},{}", s.step, s.epoch, s.lr, s.loss, s.grad_norm, s.clipped_grad_norm);
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("epoch,step,train_loss,score,mean_return,success_rate,best_score\n");
        for e in &self.evals {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.step,
                e.train_loss,
                opt(e.score),
                opt(e.mean_return),
                opt(e.success_rate),
                opt(e.best_score)
            );
        }
        out
    }

    /// One JSON object per line: every step record, with each evaluation
    /// record placed after the last step of its epoch.
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&Line::Step(s)).expect("record serializes"));
            out.push('\n');
            while let Some(e) = evals.next_if(|e| e.step == s.step + 1) {
                out.push_str(&serde_json::to_string(&Line::Eval(e)).expect("record serializes"));
                out.push('\n');
            }
        }
        for e in evals {
            out.push_str(&serde_json::to_string(&Line::Eval(e)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `steps.csv`, `evals.csv` and `log.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("steps.csv", self.steps_csv()), ("evals.csv", self.evals_csv()), ("log.jsonl", self.jsonl())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Largest post-clip gradient norm over all steps.
    pub fn max_clipped_norm(&self) -> f64 {
        self.steps.iter().map(|s| s.clipped_grad_norm).fold(0.0, f64::max)
    }
}
