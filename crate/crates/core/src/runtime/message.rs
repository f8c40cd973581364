//! Typed protocol messages and the in-process transport that counts them.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::nn::DenseMatrix;
use crate::{Error, Result};

/// Party identifier. Displayed as `A`, `B`, `C`, ... for the first 26.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartyId(pub u32);

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 26 {
            write!(f, "{}", char::from(b'A' + self.0 as u8))
        } else {
            write!(f, "P{}", self.0)
        }
    }
}

impl FromStr for PartyId {
    type Err = Error;

    /// Accepts a letter (`A` is party 0) or a zero-based index.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<u32>() {
            return Ok(PartyId(n));
        }
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => {
                Ok(PartyId(u32::from(c.to_ascii_uppercase() as u8 - b'A')))
            }
            _ => Err(Error::Validation(format!("not a party id: {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    /// Passive party to active party: a batch of embeddings.
    EmbeddingUp,
    /// Active party to passive party: dL/dH for that party's slice.
    GradientDown,
}

impl MessageKind {
    fn code(self) -> u8 {
        match self {
            MessageKind::EmbeddingUp => 1,
            MessageKind::GradientDown => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(MessageKind::EmbeddingUp),
            2 => Ok(MessageKind::GradientDown),
            other => Err(Error::Protocol(format!("unknown message kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub from: PartyId,
    pub to: PartyId,
    pub epoch: u32,
    pub batch_index: u32,
    pub payload: DenseMatrix,
}

impl Message {
    /// Fixed little-endian layout: kind u8, from u32, to u32, epoch u32,
    /// batch u32, rows u32, cols u32, then rows*cols f64 row-major.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + self.payload.data().len() * 8);
        out.push(self.kind.code());
        for v in [
            self.from.0,
            self.to.0,
            self.epoch,
            self.batch_index,
            self.payload.rows() as u32,
            self.payload.cols() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.payload.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 25 {
            return Err(Error::Protocol("message shorter than its header".into()));
        }
        let word = |i: usize| {
            let off = 1 + 4 * i;
            u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
        };
        let (rows, cols) = (word(4) as usize, word(5) as usize);
        let body = &bytes[25..];
        if body.len() != rows * cols * 8 {
            return Err(Error::Protocol(format!(
                "payload holds {} bytes, header says {rows}x{cols}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            kind: MessageKind::from_code(bytes[0])?,
            from: PartyId(word(0)),
            to: PartyId(word(1)),
            epoch: word(2),
            batch_index: word(3),
            payload: DenseMatrix::new(rows, cols, data)?,
        })
    }
}

/// Monotone count of protocol messages sent during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MessageTally {
    pub embedding_up: u64,
    pub gradient_down: u64,
}

impl MessageTally {
    pub fn total(&self) -> u64 {
        self.embedding_up + self.gradient_down
    }

    pub fn since(&self, earlier: &MessageTally) -> u64 {
        self.total() - earlier.total()
    }
}

/// In-process transport. Training messages go through a queue and are
/// counted in [`MessageTally`]; evaluation uploads are counted separately.
#[derive(Debug, Clone)]
pub struct MessageBus {
    active: PartyId,
    queue: VecDeque<Message>,
    tally: MessageTally,
    eval_uploads: u64,
    captured: Option<Vec<Message>>,
}

impl MessageBus {
    pub fn new(active: PartyId) -> Self {
        Self {
            active,
            queue: VecDeque::new(),
            tally: MessageTally::default(),
            eval_uploads: 0,
            captured: None,
        }
    }

    /// Keeps a copy of every training message for later inspection.
    pub fn with_capture(mut self) -> Self {
        self.captured = Some(Vec::new());
        self
    }

    pub fn tally(&self) -> MessageTally {
        self.tally
    }

    pub fn eval_uploads(&self) -> u64 {
        self.eval_uploads
    }

    pub fn captured(&self) -> &[Message] {
        self.captured.as_deref().unwrap_or(&[])
    }

    pub fn send(&mut self, msg: Message) -> Result<()> {
        match msg.kind {
            MessageKind::EmbeddingUp if msg.to != self.active => {
                return Err(Error::Protocol(format!(
                    "embedding from {} addressed to {} instead of the active party {}",
                    msg.from, msg.to, self.active
                )))
            }
            MessageKind::GradientDown if msg.from != self.active => {
                return Err(Error::Protocol(format!(
                    "gradient sent by {} but only the active party {} sends gradients",
                    msg.from, self.active
                )))
            }
            _ => {}
        }
        match msg.kind {
            MessageKind::EmbeddingUp => self.tally.embedding_up += 1,
            MessageKind::GradientDown => self.tally.gradient_down += 1,
        }
        if let Some(log) = &mut self.captured {
            log.push(msg.clone());
        }
        self.queue.push_back(msg);
        Ok(())
    }

    /// Counts an evaluation-time embedding upload. These never enter the
    /// training queue.
    pub fn record_eval_upload(&mut self) {
        self.eval_uploads += 1;
    }

    /// Removes and returns every queued message addressed to `party`, in
    /// arrival order.
    pub fn drain_for(&mut self, party: PartyId) -> Vec<Message> {
        let (mine, rest): (VecDeque<_>, VecDeque<_>) =
            self.queue.drain(..).partition(|m| m.to == party);
        self.queue = rest;
        mine.into_iter().collect()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: MessageKind, from: u32, to: u32) -> Message {
        Message {
            kind,
            from: PartyId(from),
            to: PartyId(to),
            epoch: 3,
            batch_index: 7,
            payload: DenseMatrix::from_fn(2, 3, |r, c| r as f64 - c as f64 * 0.1),
        }
    }

    #[test]
    fn party_ids_parse_and_display() {
        assert_eq!("A".parse::<PartyId>().unwrap(), PartyId(0));
        assert_eq!("c".parse::<PartyId>().unwrap(), PartyId(2));
        assert_eq!("4".parse::<PartyId>().unwrap(), PartyId(4));
        assert_eq!(PartyId(1).to_string(), "B");
        assert!("AB".parse::<PartyId>().is_err());
    }

    #[test]
    fn encode_decode_is_exact() {
        let m = msg(MessageKind::GradientDown, 2, 0);
        assert_eq!(Message::decode(&m.encode()).unwrap(), m);
        let mut bytes = m.encode();
        bytes.pop();
        assert!(Message::decode(&bytes).is_err());
    }

    #[test]
    fn direction_is_enforced_and_counted() {
        let mut bus = MessageBus::new(PartyId(2));
        bus.send(msg(MessageKind::EmbeddingUp, 0, 2)).unwrap();
        bus.send(msg(MessageKind::EmbeddingUp, 2, 2)).unwrap();
        assert!(bus.send(msg(MessageKind::EmbeddingUp, 0, 1)).is_err());
        assert!(bus.send(msg(MessageKind::GradientDown, 0, 1)).is_err());
        bus.send(msg(MessageKind::GradientDown, 2, 0)).unwrap();
        assert_eq!(bus.tally().embedding_up, 2);
        assert_eq!(bus.tally().gradient_down, 1);
        assert_eq!(bus.drain_for(PartyId(2)).len(), 2);
        assert_eq!(bus.pending(), 1);
    }
}
