//! Program builders for the one-word flag handshake between a producer and
//! a consumer, and for barriers made of one flag per producer.
//!
//! The flag always lives in the consumer's memory. The producer writes 1;
//! the consumer spins until it reads 1 and writes -1 back.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::mesh::{CoreId, GlobalAddress};
use crate::sim::{Instr, Payload, TaskProgram};

pub const FLAG_SET: i32 = 1;
pub const FLAG_CLEARED: i32 = -1;
/// Worst-case cycles of the consumer's poll-detect-clear path.
pub const MAX_WAIT_DETECT: u64 = 6;
/// Producer cycles spent on one flag write.
pub const SIGNAL_CYCLES: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("protocol misuse: {0}")]
    ProtocolMisuse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlagChannel {
    pub consumer: CoreId,
    pub flag_offset: u32,
}

impl FlagChannel {
    pub const fn new(consumer: CoreId, flag_offset: u32) -> Self {
        Self {
            consumer,
            flag_offset,
        }
    }

    pub fn address(&self) -> GlobalAddress {
        GlobalAddress::compose(self.consumer, self.flag_offset)
    }
}

/// Appends the producer's flag write (one issue cycle).
pub fn emit_signal(mut p: TaskProgram, ch: FlagChannel) -> TaskProgram {
    p.push(Instr::RemoteWrite {
        dst: ch.address(),
        payload: Payload::Word(FLAG_SET),
    });
    p
}

/// Appends the consumer's spin-and-clear on `ch`.
pub fn emit_wait(mut p: TaskProgram, ch: FlagChannel, detect_cycles: u64) -> Result<TaskProgram, SyncError> {
    if p.core != ch.consumer {
        return Err(SyncError::ProtocolMisuse(format!(
            "core {} cannot wait on a flag owned by core {}",
            p.core, ch.consumer
        )));
    }
    p.push(Instr::WaitFlag {
        offset: ch.flag_offset,
        expected: FLAG_SET,
        clear_to: FLAG_CLEARED,
        detect_cycles,
    });
    Ok(p)
}

/// Appends one wait per channel, polled in list order.
pub fn emit_barrier(
    p: TaskProgram,
    channels: &[FlagChannel],
    detect_cycles: u64,
) -> Result<TaskProgram, SyncError> {
    if channels.is_empty() {
        return Err(SyncError::ProtocolMisuse("barrier over zero channels".into()));
    }
    channels
        .iter()
        .try_fold(p, |p, &ch| emit_wait(p, ch, detect_cycles))
}

/// Static checks over a set of programs and the channels connecting them:
/// channels are distinct, each is waited on only by its consumer, and each
/// has at least one producer.
pub fn validate_channels(channels: &[FlagChannel], programs: &[TaskProgram]) -> Result<(), SyncError> {
    let mut seen = BTreeSet::new();
    for ch in channels {
        if !seen.insert(*ch) {
            return Err(SyncError::ProtocolMisuse(format!(
                "channel {:#x} on core {} declared twice",
                ch.flag_offset, ch.consumer
            )));
        }
        let waited = programs.iter().any(|p| {
            p.core == ch.consumer
                && p.instrs
                    .iter()
                    .any(|i| matches!(i, Instr::WaitFlag { offset, .. } if *offset == ch.flag_offset))
        });
        if !waited {
            return Err(SyncError::ProtocolMisuse(format!(
                "channel {:#x} on core {} has no waiting consumer",
                ch.flag_offset, ch.consumer
            )));
        }
        let target = ch.address();
        let signalled = programs.iter().any(|p| {
            p.instrs.iter().any(|i| {
                matches!(i, Instr::RemoteWrite { dst, payload: Payload::Word(FLAG_SET) } if *dst == target)
            })
        });
        if !signalled {
            return Err(SyncError::ProtocolMisuse(format!(
                "channel {:#x} on core {} is never signalled",
                ch.flag_offset, ch.consumer
            )));
        }
    }
    Ok(())
}
