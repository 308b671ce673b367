//! Negotiation, relay training and transport between the data client and
//! the chain of model trainers.

mod latency;
mod message;
mod plan;
mod relay;
mod schedule;
mod transport;

pub use latency::{activation_bytes, estimate_latency};
pub use message::{Control, MessageKind, Payload, ProtocolMessage, Role};
pub use plan::{negotiate, DpConfig, EncoderKind, ExperimentPlan, LabelConfig, Seeds, Topology};
pub use relay::{
    anchor_activation, init_client_segment, init_trainer_segments, run_relay, run_training,
    RelayConfig, TrainingHistory, TrainingOutcome,
};
pub use schedule::BatchSchedule;
pub use transport::{make_transport, InProcTransport, Link, TcpTransport, Transport, TransportKind};

#[cfg(test)]
pub(crate) use plan::tests::small_plan;
