use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::TrainConfig;
use super::loss::{compute_loss, sample_batch, CurriculumState, LossBreakdown};
use crate::actnet::{init_network, save_checkpoint, Checkpoint, AdamState, InputNormalization, ValueNet};
use crate::error::{Error, Result};

pub const LOSS_CSV_HEADER: &str = "iter,gamma,total,residual,terminal";

/// Single-writer training loop; one Adam step per iteration on a fresh batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    net: ValueNet,
    optimizer: AdamState,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let norm = InputNormalization::from_bounds(&config.system.input_bounds())?;
        let net = init_network(
            config.schedule.clone(),
            config.system.dim() + 1,
            config.hidden_width,
            config.omega0,
            config.seed,
        )?
        .with_normalization(norm)?;
        let optimizer = AdamState::for_net(&net, config.learning_rate_at(0));
        // The sampler gets its own stream so it never overlaps initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            net,
            optimizer,
            rng,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &ValueNet {
        &self.net
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    /// Number of completed steps.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.total_iters()
    }

    pub fn curriculum(&self) -> CurriculumState {
        CurriculumState::at(
            self.iteration,
            self.config.pretrain_iters,
            self.config.curriculum_iters,
        )
    }

    /// Run one step. A non-finite loss or gradient leaves the network
    /// untouched and returns [`Error::Diverged`].
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let state = self.curriculum();
        let batch = sample_batch(
            &self.config.system,
            &state,
            self.config.batch_size,
            self.config.terminal_fraction,
            &mut self.rng,
        );
        let eval = compute_loss(
            &self.net,
            &self.config.system,
            &batch,
            self.config.terminal_weight,
            &state,
        )?;
        if !eval.breakdown.total.is_finite() || !eval.gradients.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
            });
        }
        self.optimizer.learning_rate = self.config.learning_rate_at(self.iteration);
        self.optimizer.apply(&mut self.net, &eval.gradients)?;
        self.iteration += 1;
        Ok(eval.breakdown)
    }

    /// Checkpoint with the config and progress as metadata.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.config.to_pairs();
        meta.push(("iteration".into(), self.iteration.to_string()));
        save_checkpoint(&self.net, Some(&self.optimizer), &meta)
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: ValueNet,
    pub optimizer: AdamState,
    /// Records at the log interval plus the last step of each phase.
    pub log: Vec<LossBreakdown>,
    /// Snapshot at the end of pretraining.
    pub pretrained: ValueNet,
}

pub fn write_loss_header(w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")
}

pub fn write_loss_record(w: &mut impl Write, r: &LossBreakdown) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{}",
        r.iteration, r.gamma, r.total, r.residual_term, r.terminal_term
    )
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.cfg";
    pub const LOSS: &str = "loss.csv";
    pub const PRETRAIN: &str = "pretrain.ckpt";
    pub const DIVERGED: &str = "diverged.ckpt";
    pub const CHECKPOINT_DIR: &str = "checkpoints";

    pub fn final_checkpoint(run_name: &str) -> String {
        format!("{run_name}.ckpt")
    }
}

/// Final checkpoint of a finished run in `dir` trained with exactly
/// `config`, if there is one.
pub fn completed_run(config: &TrainConfig, dir: &Path) -> Option<Checkpoint> {
    let stored = fs::read_to_string(dir.join(files::CONFIG)).ok()?;
    if stored != config.to_text() {
        return None;
    }
    let ckpt = Checkpoint::load(dir.join(files::final_checkpoint(&config.run_name()))).ok()?;
    let done = ckpt.meta("iteration")?.parse::<usize>().ok()?;
    (done == config.total_iters()).then_some(ckpt)
}

pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    train_with(config, out_dir, |_| {})
}

/// Train from scratch. With `out_dir`, writes the config, the loss log,
/// periodic checkpoints, the end-of-pretraining checkpoint and the final
/// checkpoint there; `on_log` sees every logged record.
pub fn train_with(
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_log: impl FnMut(&LossBreakdown),
) -> Result<TrainResult> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut loss_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join(files::CHECKPOINT_DIR))?;
            fs::write(dir.join(files::CONFIG), config.to_text())?;
            let mut w = BufWriter::new(File::create(dir.join(files::LOSS))?);
            write_loss_header(&mut w)?;
            Some(w)
        }
        None => None,
    };
    let total = config.total_iters();
    let mut log = Vec::new();
    let mut pretrained = None;
    while !trainer.is_finished() {
        let k = trainer.iteration();
        let record = match trainer.step() {
            Ok(r) => r,
            Err(Error::Diverged { iteration }) => {
                if let Some(dir) = out_dir {
                    if let Some(w) = loss_file.as_mut() {
                        w.flush()?;
                    }
                    fs::write(dir.join(files::DIVERGED), trainer.checkpoint_bytes()?)?;
                }
                return Err(Error::Diverged { iteration });
            }
            Err(e) => return Err(e),
        };
        let done = trainer.iteration();
        let phase_end = done == config.pretrain_iters || done == total;
        if k % config.log_interval == 0 || phase_end {
            if let Some(w) = loss_file.as_mut() {
                write_loss_record(w, &record)?;
            }
            on_log(&record);
            log.push(record);
        }
        if done == config.pretrain_iters {
            pretrained = Some(trainer.net().clone());
            if let Some(dir) = out_dir {
                fs::write(dir.join(files::PRETRAIN), trainer.checkpoint_bytes()?)?;
            }
        }
        if let Some(dir) = out_dir {
            if done % config.checkpoint_interval == 0 && done != total {
                let path = dir
                    .join(files::CHECKPOINT_DIR)
                    .join(format!("iter_{done}.ckpt"));
                fs::write(path, trainer.checkpoint_bytes()?)?;
            }
        }
    }
    if let (Some(dir), Some(w)) = (out_dir, loss_file.as_mut()) {
        w.flush()?;
        fs::write(
            dir.join(files::final_checkpoint(&config.run_name())),
            trainer.checkpoint_bytes()?,
        )?;
    }
    Ok(TrainResult {
        net: trainer.net.clone(),
        optimizer: trainer.optimizer.clone(),
        log,
        pretrained: pretrained.expect("pretraining runs at least one step"),
    })
}
