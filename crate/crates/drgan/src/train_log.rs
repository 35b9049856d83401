use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use drgan_core::losses::LossReport;
use drgan_core::trainer::{GanModel, StepRecord, TrainObserver};

use crate::checkpoint::save_checkpoint;
use crate::error::io_err;

/// Streams `train_log.csv` and writes a checkpoint after every epoch.
pub struct RunObserver {
    writer: csv::Writer<File>,
    checkpoint_dir: Option<PathBuf>,
    pub steps_seen: u64,
}

impl RunObserver {
    /// Appends to an existing log when resuming.
    pub fn new(log_path: &Path, checkpoint_dir: Option<PathBuf>) -> crate::Result<Self> {
        let existed = log_path.is_file();
        let file = OpenOptions::new().create(true).append(true).open(log_path).map_err(io_err(log_path))?;
        let mut writer = csv::Writer::from_writer(file);
        if !existed {
            let mut header = vec!["step", "epoch", "stage"];
            header.extend(LossReport::FIELDS);
            header.push("grade_head");
            writer.write_record(&header).map_err(|e| crate::error::format_err(log_path, e))?;
        }
        Ok(Self { writer, checkpoint_dir, steps_seen: 0 })
    }
}

fn core_io(e: impl std::fmt::Display) -> drgan_core::Error {
    drgan_core::Error::State(format!("log write failed: {e}"))
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, r: &StepRecord) -> drgan_core::Result<()> {
        let stage = serde_json::to_value(r.stage).map_err(core_io)?;
        let mut row = vec![r.step.to_string(), r.epoch.to_string(), stage.as_str().unwrap_or_default().to_string()];
        row.extend(r.losses.values().iter().map(|v| format!("{v:.9e}")));
        row.push(format!("{:.9e}", r.grade_head));
        self.writer.write_record(&row).map_err(core_io)?;
        self.steps_seen += 1;
        if r.step % 10 == 0 {
            log::info!("step {} epoch {} total_g {:.4} total_d {:.4}", r.step, r.epoch, r.losses.total_g, r.losses.total_d);
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, model: &GanModel) -> drgan_core::Result<()> {
        self.writer.flush().map_err(core_io)?;
        if let Some(dir) = &self.checkpoint_dir {
            save_checkpoint(model, dir).map_err(core_io)?;
            log::info!("epoch {} done, checkpoint at {}", model.state.epoch, dir.display());
        }
        Ok(())
    }
}
