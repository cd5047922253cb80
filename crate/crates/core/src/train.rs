//! Training loops for the diffusion and consistency objectives over any
//! [`Network`], with AdamW state that round-trips through `LCL1`.

use rand::Rng;

use crate::checkpoint::{self, Entry};
use crate::consistency::{consistency_loss_tape, gap_at, huber_c, ConsistencyDraw, ConsistencySchedule, TeacherState};
use crate::edm::{diffusion_loss_tape, EdmParams, NoiseDraw};
use crate::error::{ensure, Error, Result};
use crate::net::Network;
use crate::optim::{AdamW, TrainSchedule};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Optimizer plus the number of completed steps.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub opt: AdamW<T>,
    pub step: usize,
}

/// Per-step record of a consistency update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyStep {
    pub loss: f64,
    pub gap: f64,
    /// True when the backward pass produced no gradient for any teacher leaf.
    pub teacher_untouched: bool,
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("step {step}: {msg}")),
        other => other,
    }
}

fn collect_grads<T: Scalar>(tape: &Tape<T>, loss: Var, vars: &[Var]) -> Result<Vec<Vec<T>>> {
    let mut g = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| g.take_or_zeros(v, tape.value(v).len())).collect())
}

impl<T: Scalar> Trainer<T> {
    pub fn new<N: Network<T>>(net: &N, schedule: TrainSchedule) -> Result<Self> {
        Ok(Self { opt: AdamW::new(net.store(), schedule)?, step: 0 })
    }

    pub fn remaining(&self) -> usize {
        self.opt.schedule.total_steps.saturating_sub(self.step)
    }

    /// One denoising-loss update on `clean` under `cond`; returns the loss.
    pub fn diffusion_step<N: Network<T>, R: Rng + ?Sized>(
        &mut self,
        net: &mut N,
        clean: &Tensor<T>,
        cond: &N::Cond,
        edm: &EdmParams,
        rng: &mut R,
    ) -> Result<f64> {
        let draw = NoiseDraw::sample(clean.shape(), edm, rng);
        let mut tape = Tape::new();
        let vars = net.store().load(&mut tape, true);
        let loss = diffusion_loss_tape(&*net, &mut tape, &vars, clean, cond, &draw, edm)
            .map_err(|e| with_step(e, self.step + 1))?;
        let value = tape.value(loss)[0].to_f64_lossy();
        let grads = collect_grads(&tape, loss, &vars)?;
        self.opt.step(net.store_mut(), grads).map_err(|e| with_step(e, self.step + 1))?;
        self.step += 1;
        Ok(value)
    }

    /// One consistency update. The teacher is refreshed to the student first
    /// and evaluated on the same tape as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_step<N: Network<T>, R: Rng + ?Sized>(
        &mut self,
        net: &mut N,
        teacher: &mut TeacherState<T>,
        schedule: &ConsistencySchedule,
        clean: &Tensor<T>,
        cond: &N::Cond,
        edm: &EdmParams,
        rng: &mut R,
    ) -> Result<ConsistencyStep> {
        teacher.refresh(net.store());
        let gap = gap_at(schedule, self.step.min(schedule.total_steps));
        let draw = ConsistencyDraw::sample(clean.shape(), gap, edm, rng);
        let dim = clean.numel() / clean.batch();
        let mut tape = Tape::new();
        let student = net.store().load(&mut tape, true);
        let frozen = teacher.load(&mut tape);
        let loss =
            consistency_loss_tape(&*net, &mut tape, &student, &frozen, clean, cond, &draw, edm, T::of(huber_c(dim)))
                .map_err(|e| with_step(e, self.step + 1))?;
        let value = tape.value(loss)[0].to_f64_lossy();
        let mut g = tape.backward(loss)?;
        let teacher_untouched = frozen.iter().all(|&v| g.get(v).is_none());
        let grads = student.iter().map(|&v| g.take_or_zeros(v, tape.value(v).len())).collect();
        self.opt.step(net.store_mut(), grads).map_err(|e| with_step(e, self.step + 1))?;
        self.step += 1;
        Ok(ConsistencyStep { loss: value, gap, teacher_untouched })
    }

    /// Model weights, optimizer moments and the step counter as `LCL1` records.
    pub fn entries<N: Network<T>>(&self, net: &N) -> Vec<Entry> {
        let mut out = vec![Entry::meta("step", &self.step.to_string())];
        out.extend(checkpoint::store_entries(net.store(), "model/"));
        for (name, st) in net.store().names().iter().zip(&self.opt.states) {
            out.push(Entry::from_tensor(format!("adam.m/{name}"), &st.first_moment));
            out.push(Entry::from_tensor(format!("adam.v/{name}"), &st.second_moment));
        }
        out
    }

    /// Restores weights and optimizer state written by [`Trainer::entries`].
    pub fn restore<N: Network<T>>(&mut self, net: &mut N, entries: &[Entry]) -> Result<()> {
        let step: usize = checkpoint::meta_value(entries, "step")
            .ok_or_else(|| Error::Corruption("checkpoint has no step record".into()))?
            .parse()
            .map_err(|e| Error::Corruption(format!("bad step record: {e}")))?;
        checkpoint::restore_store(net.store_mut(), entries, "model/")?;
        for (name, st) in net.store().names().iter().zip(self.opt.states.iter_mut()) {
            let find = |prefix: &str| {
                entries
                    .iter()
                    .find(|e| e.name == format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Corruption(format!("missing optimizer record {prefix}{name}")))?
                    .to_tensor::<T>()
            };
            let (m, v) = (find("adam.m/")?, find("adam.v/")?);
            ensure(m.shape() == st.first_moment.shape() && v.shape() == st.second_moment.shape(), || {
                format!("optimizer record shape mismatch for {name}")
            })?;
            st.first_moment = m;
            st.second_moment = v;
            st.step_count = step as u64;
        }
        self.step = step;
        Ok(())
    }
}

/// Runs `steps` diffusion updates, drawing each batch from `batches`.
pub fn train_diffusion<T, N, R, F>(
    net: &mut N,
    trainer: &mut Trainer<T>,
    edm: &EdmParams,
    steps: usize,
    rng: &mut R,
    mut batches: F,
) -> Result<Vec<f64>>
where
    T: Scalar,
    N: Network<T>,
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<(Tensor<T>, N::Cond)>,
{
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (clean, cond) = batches(rng)?;
        losses.push(trainer.diffusion_step(net, &clean, &cond, edm, rng)?);
    }
    Ok(losses)
}

/// Runs `steps` consistency updates with a fresh stop-gradient teacher each step.
#[allow(clippy::too_many_arguments)]
pub fn train_consistency<T, N, R, F>(
    net: &mut N,
    trainer: &mut Trainer<T>,
    schedule: &ConsistencySchedule,
    edm: &EdmParams,
    steps: usize,
    rng: &mut R,
    mut batches: F,
) -> Result<Vec<ConsistencyStep>>
where
    T: Scalar,
    N: Network<T>,
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<(Tensor<T>, N::Cond)>,
{
    schedule.validate()?;
    let mut teacher = TeacherState::snapshot(net.store());
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (clean, cond) = batches(rng)?;
        log.push(trainer.consistency_step(net, &mut teacher, schedule, &clean, &cond, edm, rng)?);
    }
    Ok(log)
}
