//! Role state machines for pipelined relay training and the deterministic
//! scheduler that drives them.
//!
//! The data client sends the DP cache to `T1` and the pseudo labels to `Tn`
//! once, then leaves. Per mini-batch, `T1` slices the cache, activations flow
//! `T1 -> ... -> Tn`, `Tn` takes the loss and gradients flow back. At the end
//! of every epoch `Tn` sends a `Continue`/`Stop` control upstream.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::message::{Control, Payload, ProtocolMessage, Role};
use super::plan::{negotiate, EncoderKind, ExperimentPlan, Topology};
use super::schedule::BatchSchedule;
use super::transport::{Link, Transport};
use crate::dp::{canonical_digest, DpActivationBatch};
use crate::error::{Error, Result};
use crate::nn::{softmax_xent, Activation, DenseLayer, ForwardTrace, Segment};
use crate::tensor::TensorF64;

/// Consecutive sub-threshold epochs before early stopping.
const EARLY_STOP_PATIENCE: usize = 3;
const EARLY_STOP_MIN_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelayConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub batch_seed: u64,
    pub early_stop: bool,
    pub weight_decay: f64,
}

impl RelayConfig {
    pub fn from_plan(plan: &ExperimentPlan) -> Self {
        Self {
            epochs: plan.epochs,
            lr: plan.lr,
            momentum: plan.momentum,
            batch_size: plan.batch_size,
            batch_seed: plan.seeds.batch_order,
            early_stop: plan.early_stop,
            weight_decay: plan.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean training loss per completed epoch, as seen by `Tn`.
    pub epoch_losses: Vec<f64>,
    /// `epoch_digests[e][i]`: digest of `T(i+1)`'s parameters after epoch `e`.
    pub epoch_digests: Vec<Vec<[u8; 32]>>,
    pub stopped_early: bool,
    #[serde(skip)]
    pub link_bytes: BTreeMap<Link, u64>,
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub segments: Vec<Segment>,
    pub history: TrainingHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Setup,
    Ready,
    AwaitGradient,
    AwaitControl,
    Done,
}

struct TrainerRole {
    index: usize,
    n: usize,
    segment: Segment,
    cfg: RelayConfig,
    schedule: Option<BatchSchedule>,
    cache: Option<TensorF64>,
    labels: Option<Vec<usize>>,
    epoch: usize,
    batches: Vec<Vec<usize>>,
    cursor: usize,
    pending: Option<ForwardTrace>,
    phase: Phase,
    out_seq: HashMap<Role, u64>,
    in_seq: HashMap<Role, u64>,
    loss_sum: f64,
    loss_rows: usize,
    epoch_losses: Vec<f64>,
    digests: Vec<[u8; 32]>,
    flat_epochs: usize,
    stopped_early: bool,
}

impl TrainerRole {
    fn new(index: usize, n: usize, segment: Segment, cfg: RelayConfig) -> Self {
        Self {
            index,
            n,
            segment,
            cfg,
            schedule: None,
            cache: None,
            labels: None,
            epoch: 0,
            batches: Vec::new(),
            cursor: 0,
            pending: None,
            phase: Phase::Setup,
            out_seq: HashMap::new(),
            in_seq: HashMap::new(),
            loss_sum: 0.0,
            loss_rows: 0,
            epoch_losses: Vec::new(),
            digests: Vec::new(),
            flat_epochs: 0,
            stopped_early: false,
        }
    }

    fn me(&self) -> Role {
        Role::Trainer(self.index)
    }

    fn is_first(&self) -> bool {
        self.index == 1
    }

    fn is_last(&self) -> bool {
        self.index == self.n
    }

    fn upstream(&self) -> Role {
        Role::Trainer(self.index - 1)
    }

    fn downstream(&self) -> Role {
        Role::Trainer(self.index + 1)
    }

    fn send(&mut self, t: &mut dyn Transport, to: Role, payload: Payload) -> Result<()> {
        let from = self.me();
        let seq = self.out_seq.entry(to).or_insert(0);
        *seq += 1;
        t.send(ProtocolMessage {
            from,
            to,
            seq: *seq,
            payload,
        })
    }

    fn recv(&mut self, t: &mut dyn Transport, from: Role) -> Result<Option<Payload>> {
        let Some(m) = t.try_recv(from, self.me())? else {
            return Ok(None);
        };
        let me = self.me();
        let last = self.in_seq.entry(from).or_insert(0);
        if m.seq <= *last {
            return Err(Error::Protocol(format!(
                "message out of order on {from}->{me}: seq {} after {}",
                m.seq,
                last
            )));
        }
        *last = m.seq;
        Ok(Some(m.payload))
    }

    fn unexpected(&self, from: Role, p: &Payload) -> Error {
        Error::Protocol(format!(
            "{} got unexpected {:?} from {from} in phase {:?}",
            self.me(),
            p.kind(),
            self.phase
        ))
    }

    fn start_epoch(&mut self) {
        if let Some(s) = &self.schedule {
            self.batches = s.epoch(self.epoch);
        }
        self.cursor = 0;
        self.loss_sum = 0.0;
        self.loss_rows = 0;
    }

    fn record_digest(&mut self) -> Result<()> {
        let p = self.segment.flatten_params();
        let t = TensorF64::new(vec![p.len()], p)?;
        self.digests.push(canonical_digest(&t)?);
        Ok(())
    }

    fn poll(&mut self, t: &mut dyn Transport) -> Result<bool> {
        match self.phase {
            Phase::Setup => self.poll_setup(t),
            Phase::Ready => self.poll_ready(t),
            Phase::AwaitGradient => self.poll_gradient(t),
            Phase::AwaitControl => self.poll_control(t),
            Phase::Done => Ok(false),
        }
    }

    fn poll_setup(&mut self, t: &mut dyn Transport) -> Result<bool> {
        let mut progressed = false;
        while (self.is_first() && self.cache.is_none()) || (self.is_last() && self.labels.is_none()) {
            match self.recv(t, Role::Client)? {
                Some(Payload::Activation(x)) if self.is_first() && self.cache.is_none() => {
                    if x.cols() != self.segment.input_dim() {
                        return Err(Error::Shape(format!(
                            "cache width {} does not match T1 input {}",
                            x.cols(),
                            self.segment.input_dim()
                        )));
                    }
                    self.cache = Some(x);
                }
                Some(Payload::PseudoLabels(y)) if self.is_last() && self.labels.is_none() => {
                    self.labels = Some(y);
                }
                Some(p) => return Err(self.unexpected(Role::Client, &p)),
                None => return Ok(progressed),
            }
            progressed = true;
        }
        let rows = match (&self.cache, &self.labels) {
            (Some(c), Some(l)) if c.rows() != l.len() => {
                return Err(Error::Shape("cache rows differ from label count".into()))
            }
            (Some(c), _) => Some(c.rows()),
            (_, Some(l)) => Some(l.len()),
            _ => None,
        };
        if let Some(rows) = rows {
            self.schedule = Some(BatchSchedule::new(rows, self.cfg.batch_size, self.cfg.batch_seed)?);
        }
        self.start_epoch();
        self.phase = Phase::Ready;
        Ok(true)
    }

    fn poll_ready(&mut self, t: &mut dyn Transport) -> Result<bool> {
        if self.is_first() {
            let idx = self.batches[self.cursor].clone();
            let x = self.cache.as_ref().unwrap().select_rows(&idx);
            if self.is_last() {
                self.local_step(t, &idx, &x)?;
            } else {
                let (h, trace) = self.segment.forward(&x)?;
                self.pending = Some(trace);
                self.send(t, self.downstream(), Payload::Activation(h))?;
                self.phase = Phase::AwaitGradient;
            }
            return Ok(true);
        }
        if !self.is_last() {
            if let Some(p) = self.recv(t, self.downstream())? {
                return match p {
                    Payload::Control(c) => {
                        self.record_digest()?;
                        self.send(t, self.upstream(), Payload::Control(c))?;
                        if c == Control::Stop {
                            self.phase = Phase::Done;
                        }
                        Ok(true)
                    }
                    p => Err(self.unexpected(self.downstream(), &p)),
                };
            }
        }
        match self.recv(t, self.upstream())? {
            Some(Payload::Activation(x)) => {
                if self.is_last() {
                    let idx = self.batches[self.cursor].clone();
                    if x.rows() != idx.len() {
                        return Err(Error::Shape(format!(
                            "T{} received {} rows, schedule expects {}",
                            self.index,
                            x.rows(),
                            idx.len()
                        )));
                    }
                    self.local_step(t, &idx, &x)?;
                } else {
                    let (h, trace) = self.segment.forward(&x)?;
                    self.pending = Some(trace);
                    self.send(t, self.downstream(), Payload::Activation(h))?;
                    self.phase = Phase::AwaitGradient;
                }
                Ok(true)
            }
            Some(p) => Err(self.unexpected(self.upstream(), &p)),
            None => Ok(false),
        }
    }

    /// Loss, backward and update at the last trainer for one batch.
    fn local_step(&mut self, t: &mut dyn Transport, idx: &[usize], x: &TensorF64) -> Result<()> {
        let labels = self.labels.as_ref().unwrap();
        let y: Vec<usize> = idx.iter().map(|&r| labels[r]).collect();
        let (logits, trace) = self.segment.forward(x)?;
        let (loss, g) = softmax_xent(&logits, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let (mut pg, dx) = self.segment.backward(&trace, &g)?;
        if !self.is_first() {
            self.send(t, self.upstream(), Payload::Gradient(dx))?;
        }
        pg.add_weight_decay(&self.segment, self.cfg.weight_decay);
        self.segment.sgd_step(&pg, self.cfg.lr, self.cfg.momentum)?;
        self.loss_sum += loss * idx.len() as f64;
        self.loss_rows += idx.len();
        self.cursor += 1;
        if self.cursor == self.batches.len() {
            self.finish_epoch_at_tail(t)?;
        }
        Ok(())
    }

    fn finish_epoch_at_tail(&mut self, t: &mut dyn Transport) -> Result<()> {
        self.record_digest()?;
        let mean = self.loss_sum / self.loss_rows as f64;
        if let Some(&prev) = self.epoch_losses.last() {
            if prev - mean < EARLY_STOP_MIN_DELTA {
                self.flat_epochs += 1;
            } else {
                self.flat_epochs = 0;
            }
        }
        self.epoch_losses.push(mean);
        let early = self.cfg.early_stop && self.flat_epochs >= EARLY_STOP_PATIENCE;
        let stop = early || self.epoch + 1 == self.cfg.epochs;
        self.stopped_early = early && self.epoch + 1 < self.cfg.epochs;
        if !self.is_first() {
            let c = if stop { Control::Stop } else { Control::Continue };
            self.send(t, self.upstream(), Payload::Control(c))?;
        }
        if stop {
            self.phase = Phase::Done;
        } else {
            self.epoch += 1;
            self.start_epoch();
        }
        Ok(())
    }

    fn poll_gradient(&mut self, t: &mut dyn Transport) -> Result<bool> {
        let g = match self.recv(t, self.downstream())? {
            Some(Payload::Gradient(g)) => g,
            Some(p) => return Err(self.unexpected(self.downstream(), &p)),
            None => return Ok(false),
        };
        let trace = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("gradient without a pending forward".into()))?;
        let (mut pg, dx) = self.segment.backward(&trace, &g)?;
        if !self.is_first() {
            self.send(t, self.upstream(), Payload::Gradient(dx))?;
        }
        pg.add_weight_decay(&self.segment, self.cfg.weight_decay);
        self.segment.sgd_step(&pg, self.cfg.lr, self.cfg.momentum)?;
        if self.is_first() {
            self.cursor += 1;
            if self.cursor == self.batches.len() {
                self.record_digest()?;
                self.phase = Phase::AwaitControl;
            } else {
                self.phase = Phase::Ready;
            }
        } else {
            self.phase = Phase::Ready;
        }
        Ok(true)
    }

    fn poll_control(&mut self, t: &mut dyn Transport) -> Result<bool> {
        match self.recv(t, self.downstream())? {
            Some(Payload::Control(Control::Continue)) => {
                self.epoch += 1;
                self.start_epoch();
                self.phase = Phase::Ready;
                Ok(true)
            }
            Some(Payload::Control(Control::Stop)) => {
                self.phase = Phase::Done;
                Ok(true)
            }
            Some(p) => Err(self.unexpected(self.downstream(), &p)),
            None => Ok(false),
        }
    }
}

/// Initialises each trainer's segment from its role seed. Every segment ends
/// in ReLU except the last, which emits logits.
pub fn init_trainer_segments(plan: &ExperimentPlan) -> Result<Vec<Segment>> {
    let n = plan.trainers();
    plan.trainer_dims
        .iter()
        .zip(&plan.seeds.trainers)
        .enumerate()
        .map(|(i, (dims, &seed))| {
            let hidden = plan.trainer_activation;
            let last = if i + 1 == n { Activation::Identity } else { hidden };
            Segment::init_with(dims, hidden, last, seed)
        })
        .collect()
}

/// The client's frozen encoder. `inputs` are the client's training features,
/// used only by [`EncoderKind::CentredLinear`].
pub fn init_client_segment(plan: &ExperimentPlan, inputs: &TensorF64) -> Result<Segment> {
    let mut s = match plan.encoder {
        EncoderKind::Relu => Segment::init(&plan.client_dims, Activation::Relu, plan.seeds.client_init)?,
        EncoderKind::CentredLinear => {
            let raw = Segment::init(&plan.client_dims, Activation::Identity, plan.seeds.client_init)?;
            let h = raw.infer(inputs)?;
            let n = h.rows().max(1) as f64;
            let mut mean = vec![0.0; h.cols()];
            for row in h.iter_rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n;
                }
            }
            let l = &raw.layers()[0];
            let bias = l.bias.iter().zip(&mean).map(|(b, m)| b - m).collect();
            Segment::new(vec![DenseLayer::new(
                l.in_dim,
                l.out_dim,
                l.weight.clone(),
                bias,
                Activation::Identity,
            )?])?
        }
    };
    s.freeze();
    Ok(s)
}

/// Runs relay training over the given segments.
pub fn run_relay(
    topology: &Topology,
    segments: Vec<Segment>,
    cache: &DpActivationBatch,
    pseudo_labels: &[usize],
    cfg: RelayConfig,
    transport: &mut dyn Transport,
) -> Result<TrainingOutcome> {
    let n = topology.trainers;
    if segments.len() != n {
        return Err(Error::InvalidArgument(format!("expected {n} segments, got {}", segments.len())));
    }
    for (i, s) in segments.iter().enumerate() {
        if s.input_dim() != topology.widths[i] || s.output_dim() != topology.widths[i + 1] {
            return Err(Error::Shape(format!("T{} does not match the negotiated widths", i + 1)));
        }
    }
    if cache.rows() != pseudo_labels.len() {
        return Err(Error::Shape("cache rows differ from label count".into()));
    }
    cache.verify_digest()?;
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }

    // The data client's only participation.
    transport.send(ProtocolMessage {
        from: Role::Client,
        to: Role::Trainer(1),
        seq: 1,
        payload: Payload::Activation(cache.values.clone()),
    })?;
    transport.send(ProtocolMessage {
        from: Role::Client,
        to: Role::Trainer(n),
        seq: if n == 1 { 2 } else { 1 },
        payload: Payload::PseudoLabels(pseudo_labels.to_vec()),
    })?;

    let mut roles: Vec<TrainerRole> = segments
        .into_iter()
        .enumerate()
        .map(|(i, s)| TrainerRole::new(i + 1, n, s, cfg))
        .collect();
    while roles.iter().any(|r| r.phase != Phase::Done) {
        let mut progressed = false;
        for r in roles.iter_mut() {
            while r.poll(transport)? {
                progressed = true;
            }
        }
        if !progressed {
            transport.idle()?;
        }
    }

    let tail = roles.last().unwrap();
    let epochs_run = tail.epoch_losses.len();
    let mut history = TrainingHistory {
        epoch_losses: tail.epoch_losses.clone(),
        epoch_digests: vec![Vec::with_capacity(n); epochs_run],
        stopped_early: tail.stopped_early,
        link_bytes: transport.link_bytes(),
    };
    for r in &roles {
        if r.digests.len() != epochs_run {
            return Err(Error::Protocol(format!(
                "T{} finished {} epochs, tail finished {epochs_run}",
                r.index,
                r.digests.len()
            )));
        }
        for (e, d) in r.digests.iter().enumerate() {
            history.epoch_digests[e].push(*d);
        }
    }
    Ok(TrainingOutcome {
        segments: roles.into_iter().map(|r| r.segment).collect(),
        history,
    })
}

/// Negotiates the plan, initialises trainer segments from their seeds and
/// trains them over the relay.
pub fn run_training(
    plan: &ExperimentPlan,
    cache: &DpActivationBatch,
    pseudo_labels: &[usize],
    transport: &mut dyn Transport,
) -> Result<TrainingOutcome> {
    let topology = negotiate(plan)?;
    let segments = init_trainer_segments(plan)?;
    run_relay(&topology, segments, cache, pseudo_labels, RelayConfig::from_plan(plan), transport)
}

/// Output of frozen segments `1..=i` over the whole cache; `i = 0` is the
/// cache itself. Its digest anchors link `i + 1` of the watermark chain.
pub fn anchor_activation(frozen: &[Segment], cache: &DpActivationBatch) -> Result<TensorF64> {
    if let Some(k) = frozen.iter().position(|s| !s.is_frozen()) {
        return Err(Error::NotFrozen(format!("T{} is not frozen", k + 1)));
    }
    let mut h = cache.values.clone();
    for s in frozen {
        h = s.infer(&h)?;
    }
    Ok(h)
}
