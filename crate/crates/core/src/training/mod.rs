//! The training loop: generator steps on the full objective, the two-step
//! discriminator procedure with shadow mixing, image pools and schedules.

pub mod checkpoint;
pub mod convergence;
pub mod optim;
pub mod pool;
pub mod shadow;

pub use checkpoint::{latest_checkpoint, CheckpointPaths};
pub use convergence::Convergence;
pub use optim::{lr_schedule, Adam};
pub use pool::ImagePool;
pub use shadow::{mix_parameters, ShadowPair};

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use guidegan_tensor::{set_deterministic, Bind, Bound, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::data::{Dataset, Domain};
use crate::error::{Error, IoContext, Result};
use crate::guidance::{guidance_regularization, sources};
use crate::losses::{adversarial_loss_discriminator, adversarial_loss_generator, cycle_loss, total_generator_loss, LossParts};
use crate::networks::GuidedCycleGan;

/// Scalar results of one generator step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLosses {
    pub gan: f64,
    pub cyc: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct GenStep {
    pub losses: GenLosses,
    pub fake_a: Tensor<f32>,
    pub fake_b: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscLosses {
    pub d_a: f64,
    pub d_b: f64,
}

/// Record of one full iteration, as written to `metrics.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub gen: GenLosses,
    pub disc: DiscLosses,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
    MaxSteps,
}

/// Loop position and stopping state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub index_in_epoch: usize,
    pub convergence: Convergence,
    pub stopped: Option<StopReason>,
}

/// One Adam state per parameter store, in [`crate::networks::COMPONENTS`] order.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub gen_ab: Adam<f32>,
    pub gen_ba: Adam<f32>,
    pub d_a: Adam<f32>,
    pub d_b: Adam<f32>,
    pub shadow_a: Adam<f32>,
    pub shadow_b: Adam<f32>,
}

impl Optimizers {
    pub fn new(model: &GuidedCycleGan<f32>, cfg: &TrainingConfig) -> Self {
        let adam = |s| Adam::new(s, cfg.train.beta1, cfg.train.beta2);
        Self {
            gen_ab: adam(&model.gen_ab.params),
            gen_ba: adam(&model.gen_ba.params),
            d_a: adam(&model.d_a.params),
            d_b: adam(&model.d_b.params),
            shadow_a: adam(&model.shadow_a.params),
            shadow_b: adam(&model.shadow_b.params),
        }
    }

    pub fn all(&self) -> [&Adam<f32>; 6] {
        [&self.gen_ab, &self.gen_ba, &self.d_a, &self.d_b, &self.shadow_a, &self.shadow_b]
    }

    pub fn all_mut(&mut self) -> [&mut Adam<f32>; 6] {
        [
            &mut self.gen_ab,
            &mut self.gen_ba,
            &mut self.d_a,
            &mut self.d_b,
            &mut self.shadow_a,
            &mut self.shadow_b,
        ]
    }
}

struct Logs {
    metrics: BufWriter<File>,
    losses: BufWriter<File>,
}

impl Logs {
    fn open(run_dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = run_dir.join(name);
            let f = OpenOptions::new().create(true).append(true).open(&p).at(&p)?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            metrics: open("metrics.jsonl")?,
            losses: open("losses.jsonl")?,
        })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, r)?;
        self.metrics.write_all(b"\n").at("metrics.jsonl")?;
        let parts = [
            ("gen_gan", r.gen.gan),
            ("gen_cyc", r.gen.cyc),
            ("gen_reg", r.gen.reg),
            ("gen_total", r.gen.total),
            ("disc_a", r.disc.d_a),
            ("disc_b", r.disc.d_b),
        ];
        for (name, value) in parts {
            serde_json::to_writer(
                &mut self.losses,
                &serde_json::json!({"step": r.step, "loss": name, "value": value}),
            )?;
            self.losses.write_all(b"\n").at("losses.jsonl")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().at("metrics.jsonl")?;
        self.losses.flush().at("losses.jsonl")
    }
}

pub struct Trainer {
    pub cfg: TrainingConfig,
    pub model: GuidedCycleGan<f32>,
    pub opt: Optimizers,
    pub pool_a: ImagePool,
    pub pool_b: ImagePool,
    pub data: Dataset,
    pub state: TrainState,
    run_dir: Option<PathBuf>,
    logs: Option<Logs>,
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    f64::from(g.scalar(v))
}

impl Trainer {
    /// Fresh model and optimizer state. Without a run directory nothing is written.
    pub fn new(cfg: TrainingConfig, data: Dataset, run_dir: Option<PathBuf>) -> Result<Self> {
        set_deterministic(cfg.deterministic);
        let model = GuidedCycleGan::new(&cfg)?;
        let opt = Optimizers::new(&model, &cfg);
        let t = &cfg.train;
        let state = TrainState {
            step: 0,
            epoch: 0,
            index_in_epoch: 0,
            convergence: Convergence::new(t.convergence_window, t.convergence_eps, t.convergence_patience),
            stopped: None,
        };
        let logs = match &run_dir {
            Some(d) => {
                std::fs::create_dir_all(d).at(d)?;
                std::fs::write(d.join("config.toml"), cfg.to_toml_string()).at(d.join("config.toml"))?;
                Some(Logs::open(d)?)
            }
            None => None,
        };
        Ok(Self {
            pool_a: ImagePool::new(t.pool_size, cfg.seed, "pool-a"),
            pool_b: ImagePool::new(t.pool_size, cfg.seed, "pool-b"),
            cfg,
            model,
            opt,
            data,
            state,
            run_dir,
            logs,
        })
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn lr(&self) -> (f64, f64) {
        let t = &self.cfg.train;
        let f = |base| lr_schedule(self.state.epoch, base, t.schedule, t.decay_every);
        (f(t.lr), f(self.cfg.shadow_lr()))
    }

    fn nonfinite(&self, what: &'static str, detail: String) -> Error {
        if let Some(dir) = &self.run_dir {
            let dump = dir.join(format!("crash-step-{:06}", self.state.step));
            if let Err(e) = checkpoint::save_to(self, &dump) {
                log::error!("could not write state dump to {}: {e}", dump.display());
            } else {
                log::error!("state dumped to {}", dump.display());
            }
        }
        Error::NonFinite {
            what,
            step: self.state.step,
            detail,
        }
    }

    /// Guidance from the shadow discriminators: one vector per configured
    /// source for the generator translating `from -> from.other()`.
    fn shadow_sources(
        &self,
        g: &mut Graph<f32>,
        shadows: &HashMap<Domain, Bound>,
        cache: &mut HashMap<(Domain, Var), Var>,
        from: Domain,
        x: Var,
    ) -> Result<Vec<Var>> {
        if !self.cfg.guided() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (dom, _) in sources(self.cfg.guidance.source, from) {
            let v = match cache.get(&(dom, x)) {
                Some(&v) => v,
                None => {
                    let v = self.model.shadow(dom).guidance(g, &shadows[&dom], x)?;
                    cache.insert((dom, x), v);
                    v
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Generator update. Guidance flows through the shadow discriminators,
    /// whose parameters are updated by the same backward pass; the live
    /// discriminators only score fakes and receive no gradient.
    pub fn generator_step(&mut self, a: &Tensor<f32>, b: &Tensor<f32>, lr: f64, shadow_lr: f64) -> Result<GenStep> {
        let cfg = &self.cfg;
        let m = &self.model;
        let mut g = Graph::<f32>::new();
        let pab = g.bind(&m.gen_ab.params, Bind::Train);
        let pba = g.bind(&m.gen_ba.params, Bind::Train);
        let pda = g.bind(&m.d_a.params, Bind::Constant);
        let pdb = g.bind(&m.d_b.params, Bind::Constant);
        let mut shadows = HashMap::new();
        if cfg.guided() {
            shadows.insert(Domain::A, g.bind(&m.shadow_a.params, Bind::Train));
            shadows.insert(Domain::B, g.bind(&m.shadow_b.params, Bind::Train));
        }
        let mut cache = HashMap::new();
        let xa = g.constant(a.clone());
        let xb = g.constant(b.clone());

        let s_xa = self.shadow_sources(&mut g, &shadows, &mut cache, Domain::A, xa)?;
        let fake_b = m.gen_ab.forward(&mut g, &pab, xa, &s_xa)?;
        let s_fb = self.shadow_sources(&mut g, &shadows, &mut cache, Domain::B, fake_b)?;
        let rec_a = m.gen_ba.forward(&mut g, &pba, fake_b, &s_fb)?;
        let s_xb = self.shadow_sources(&mut g, &shadows, &mut cache, Domain::B, xb)?;
        let fake_a = m.gen_ba.forward(&mut g, &pba, xb, &s_xb)?;
        let s_fa = self.shadow_sources(&mut g, &shadows, &mut cache, Domain::A, fake_a)?;
        let rec_b = m.gen_ab.forward(&mut g, &pab, fake_a, &s_fa)?;

        let mode = cfg.loss.gan_mode;
        let pb = m.d_b.patch(&mut g, &pdb, fake_b)?;
        let pa = m.d_a.patch(&mut g, &pda, fake_a)?;
        let gan_ab = adversarial_loss_generator(&mut g, pb, mode)?;
        let gan_ba = adversarial_loss_generator(&mut g, pa, mode)?;
        let gan = g.add(gan_ab, gan_ba)?;
        let cyc = cycle_loss(&mut g, xa, xb, rec_a, rec_b)?;

        let reg = if cfg.guided() {
            // Each generator's sources on its real input versus on its own output.
            let s_ab_fake = self.shadow_sources(&mut g, &shadows, &mut cache, Domain::A, fake_b)?;
            let s_ba_fake = self.shadow_sources(&mut g, &shadows, &mut cache, Domain::B, fake_a)?;
            let mut terms = Vec::new();
            for (real, fake) in [(&s_xa, &s_ab_fake), (&s_xb, &s_ba_fake)] {
                let per: Vec<Var> = real
                    .iter()
                    .zip(fake.iter())
                    .map(|(&r, &f)| guidance_regularization(&mut g, r, f))
                    .collect::<guidegan_tensor::Result<_>>()?;
                let sum = per[1..].iter().try_fold(per[0], |acc, &v| g.add(acc, v))?;
                terms.push(g.scale(sum, 1.0 / per.len() as f32));
            }
            Some(g.add(terms[0], terms[1])?)
        } else {
            None
        };

        let total = total_generator_loss(&mut g, LossParts { gan, cyc, reg }, cfg.loss.weights())?;
        let losses = GenLosses {
            gan: scalar(&g, gan),
            cyc: scalar(&g, cyc),
            reg: reg.map_or(0.0, |r| scalar(&g, r)),
            total: scalar(&g, total),
        };
        if !losses.total.is_finite() {
            let detail = format!("{losses:?}; graph: {:?}", g.check_finite().err());
            return Err(self.nonfinite("generator loss", detail));
        }
        let grads = g.backward(total)?;
        let fake_a = g.value(fake_a).clone();
        let fake_b = g.value(fake_b).clone();
        drop(g);

        let m = &mut self.model;
        grads.accumulate_into(&mut m.gen_ab.params);
        grads.accumulate_into(&mut m.gen_ba.params);
        self.opt.gen_ab.step(&mut m.gen_ab.params, lr);
        self.opt.gen_ba.step(&mut m.gen_ba.params, lr);
        if self.cfg.guided() {
            grads.accumulate_into(&mut m.shadow_a.params);
            grads.accumulate_into(&mut m.shadow_b.params);
            self.opt.shadow_a.step(&mut m.shadow_a.params, shadow_lr);
            self.opt.shadow_b.step(&mut m.shadow_b.params, shadow_lr);
        }
        Ok(GenStep { losses, fake_a, fake_b })
    }

    /// Live discriminator update on real images and pooled fakes.
    pub fn discriminator_step(
        &mut self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        fake_a: Tensor<f32>,
        fake_b: Tensor<f32>,
        lr: f64,
    ) -> Result<DiscLosses> {
        let pooled_a = self.pool_a.query(fake_a);
        let pooled_b = self.pool_b.query(fake_b);
        let m = &self.model;
        let mode = self.cfg.loss.gan_mode;
        let mut g = Graph::<f32>::new();
        let pda = g.bind(&m.d_a.params, Bind::Train);
        let pdb = g.bind(&m.d_b.params, Bind::Train);
        let side = |g: &mut Graph<f32>, d: &crate::networks::Discriminator<f32>, p: &Bound, real: &Tensor<f32>, fake: Tensor<f32>| {
            let xr = g.constant(real.clone());
            let xf = g.constant(fake);
            let pr = d.patch(g, p, xr)?;
            let pf = d.patch(g, p, xf)?;
            adversarial_loss_discriminator(g, pr, pf, mode)
        };
        let la = side(&mut g, &m.d_a, &pda, a, pooled_a)?;
        let lb = side(&mut g, &m.d_b, &pdb, b, pooled_b)?;
        let total = g.add(la, lb)?;
        let losses = DiscLosses {
            d_a: scalar(&g, la),
            d_b: scalar(&g, lb),
        };
        if !(losses.d_a.is_finite() && losses.d_b.is_finite()) {
            return Err(self.nonfinite("discriminator loss", format!("{losses:?}")));
        }
        let grads = g.backward(total)?;
        drop(g);
        let m = &mut self.model;
        grads.accumulate_into(&mut m.d_a.params);
        grads.accumulate_into(&mut m.d_b.params);
        self.opt.d_a.step(&mut m.d_a.params, lr);
        self.opt.d_b.step(&mut m.d_b.params, lr);
        Ok(losses)
    }

    /// Mix the live discriminators with their shadows and resynchronize.
    pub fn mix(&mut self) -> Result<()> {
        let lambda = self.cfg.train.lambda_d;
        let m = &mut self.model;
        mix_parameters(&mut m.d_a.params, &mut m.shadow_a.params, lambda)?;
        mix_parameters(&mut m.d_b.params, &mut m.shadow_b.params, lambda)
    }

    /// One full iteration: generator step, discriminator step, mixing.
    pub fn iterate(&mut self) -> Result<StepRecord> {
        let (epoch, i) = (self.state.epoch, self.state.index_in_epoch);
        let (ra, rb) = self.data.train_pair(self.cfg.seed, epoch, i);
        let (lr, shadow_lr) = self.lr();
        let gen = self.generator_step(&ra.pixels, &rb.pixels, lr, shadow_lr)?;
        let disc = self.discriminator_step(&ra.pixels, &rb.pixels, gen.fake_a, gen.fake_b, lr)?;
        self.mix()?;

        self.state.step += 1;
        self.state.index_in_epoch += 1;
        self.state.convergence.record_step(gen.losses.cyc);
        let record = StepRecord {
            step: self.state.step,
            epoch,
            gen: gen.losses,
            disc,
            lr,
        };
        if self.state.index_in_epoch >= self.data.epoch_len() {
            self.state.index_in_epoch = 0;
            self.state.epoch += 1;
            if self.state.convergence.end_epoch() {
                self.state.stopped = Some(StopReason::Converged);
            }
        }
        if let Some(l) = &mut self.logs {
            l.write(&record)?;
        }
        if self.state.step.is_multiple_of(self.cfg.train.checkpoint_every) {
            self.save_checkpoint()?;
        }
        Ok(record)
    }

    /// Reason to stop before the next iteration, if any.
    pub fn stop_reason(&self) -> Option<StopReason> {
        if let Some(r) = self.state.stopped {
            return Some(r);
        }
        if self.state.epoch >= self.cfg.train.max_epochs {
            return Some(StopReason::MaxEpochs);
        }
        match self.cfg.train.max_steps {
            Some(n) if self.state.step >= n => Some(StopReason::MaxSteps),
            _ => None,
        }
    }

    /// Train until convergence or a cap. Writes a checkpoint before the first
    /// step of a fresh run and after the last step.
    pub fn train(&mut self) -> Result<StopReason> {
        self.train_with(|_| {})
    }

    pub fn train_with(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<StopReason> {
        if self.state.step == 0 {
            self.save_checkpoint()?;
        }
        let reason = loop {
            if let Some(r) = self.stop_reason() {
                break r;
            }
            let rec = self.iterate()?;
            on_step(&rec);
        };
        self.state.stopped = Some(reason);
        self.save_checkpoint()?;
        if let Some(l) = &mut self.logs {
            l.flush()?;
        }
        Ok(reason)
    }

    /// Write `checkpoints/step-NNNNNN` and point `checkpoints/latest` at it.
    /// A no-op without a run directory.
    pub fn save_checkpoint(&mut self) -> Result<Option<PathBuf>> {
        if let Some(l) = &mut self.logs {
            l.flush()?;
        }
        match &self.run_dir {
            Some(dir) => checkpoint::save(self, dir).map(Some),
            None => Ok(None),
        }
    }

    /// Rebuild a trainer from the latest checkpoint of `run_dir`.
    pub fn resume(run_dir: &Path) -> Result<Self> {
        let ck = latest_checkpoint(run_dir)?;
        Self::resume_from(&ck, Some(run_dir.to_path_buf()))
    }

    pub fn resume_from(ck: &CheckpointPaths, run_dir: Option<PathBuf>) -> Result<Self> {
        let cfg = TrainingConfig::load(&ck.config)?;
        let root = crate::data::prepare(&cfg.data)?;
        let data = Dataset::load(&root, &cfg.data)?;
        let mut t = Self::new(cfg, data, run_dir)?;
        checkpoint::restore(&mut t, ck)?;
        Ok(t)
    }
}
