//! Relay messages and their optional byte framing.
//!
//! Frame layout (little-endian):
//!
//! ```text
//! len u32 | kind u8 | seq u64 | payload (tensor encoding)
//! ```
//!
//! `len` counts everything after itself. Label vectors travel as a rank-1
//! tensor of integral values, control codes as a one-element tensor.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, read_u8, TensorF64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Client,
    /// 1-based trainer index.
    Trainer(usize),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Client => write!(f, "C"),
            Role::Trainer(i) => write!(f, "T{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Activation = 1,
    Gradient = 2,
    PseudoLabels = 3,
    Control = 4,
}

impl MessageKind {
    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            1 => MessageKind::Activation,
            2 => MessageKind::Gradient,
            3 => MessageKind::PseudoLabels,
            4 => MessageKind::Control,
            _ => return Err(Error::Format(format!("unknown message kind {c}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    /// Start the next epoch.
    Continue = 1,
    /// Training is over; the receiver finishes after relaying.
    Stop = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Activation(TensorF64),
    Gradient(TensorF64),
    PseudoLabels(Vec<usize>),
    Control(Control),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Activation(_) => MessageKind::Activation,
            Payload::Gradient(_) => MessageKind::Gradient,
            Payload::PseudoLabels(_) => MessageKind::PseudoLabels,
            Payload::Control(_) => MessageKind::Control,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub from: Role,
    pub to: Role,
    pub seq: u64,
    pub payload: Payload,
}

impl ProtocolMessage {
    /// Encodes the frame; the link itself is implied by the connection.
    pub fn encode_frame(&self) -> Result<Vec<u8>> {
        let tensor = match &self.payload {
            Payload::Activation(t) | Payload::Gradient(t) => t.clone(),
            Payload::PseudoLabels(l) => {
                TensorF64::new(vec![l.len()], l.iter().map(|&v| v as f64).collect())?
            }
            Payload::Control(c) => TensorF64::new(vec![1], vec![*c as u8 as f64])?,
        };
        let body = tensor.to_bytes();
        let len = u32::try_from(1 + 8 + body.len())
            .map_err(|_| Error::Format("frame exceeds u32 length".into()))?;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.payload.kind() as u8);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn write_frame<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode_frame()?)?;
        Ok(())
    }

    /// Reads one frame sent over the `from -> to` link.
    pub fn read_frame<R: Read>(r: &mut R, from: Role, to: Role) -> Result<Self> {
        let len = read_u32(r)? as usize;
        if len < 9 {
            return Err(Error::Format("frame too short".into()));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        let mut cur = body.as_slice();
        let kind = MessageKind::from_code(read_u8(&mut cur)?)?;
        let seq = read_u64(&mut cur)?;
        let tensor = TensorF64::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes in frame".into()));
        }
        let payload = match kind {
            MessageKind::Activation => Payload::Activation(tensor),
            MessageKind::Gradient => Payload::Gradient(tensor),
            MessageKind::PseudoLabels => Payload::PseudoLabels(
                tensor
                    .values()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Format("non-integral label".into()))
                        }
                    })
                    .collect::<Result<_>>()?,
            ),
            MessageKind::Control => match tensor.values() {
                [c] if *c == 1.0 => Payload::Control(Control::Continue),
                [c] if *c == 2.0 => Payload::Control(Control::Stop),
                _ => return Err(Error::Format("bad control payload".into())),
            },
        };
        Ok(Self {
            from,
            to,
            seq,
            payload,
        })
    }

    pub fn wire_len(&self) -> usize {
        let body = match &self.payload {
            Payload::Activation(t) | Payload::Gradient(t) => 2 + 4 * t.shape().len() + 8 * t.len(),
            Payload::PseudoLabels(l) => 2 + 4 + 8 * l.len(),
            Payload::Control(_) => 2 + 4 + 8,
        };
        4 + 1 + 8 + body
    }
}
