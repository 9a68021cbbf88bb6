//! Constant-delay channel between the event trigger and the controller, with
//! delay-dependent Age-of-Information bookkeeping.
//!
//! Before any packet is delivered the controller only holds the prior mean of
//! `x_0`. This is modelled as a virtual sample `x_{-1} = 0` with stamp
//! [`INITIAL_STAMP`], so `Delta_k = k + 1` until the first delivery and the
//! error identity `e_k = sum_{r=1}^{Delta_k} A^{r-1} w_{k-r}` holds from step 0
//! with `w_{-1} = x_0`.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::plant::StateVector;

/// Stamp of the virtual prior sample held before the first delivery.
pub const INITIAL_STAMP: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub stamp: usize,
    pub payload: StateVector,
}

#[derive(Debug, Clone)]
pub struct ChannelState {
    tau: usize,
    in_flight: VecDeque<(usize, Packet)>,
    last_update: Option<usize>,
    last_stamp: i64,
    aoi: usize,
    next_delivery: usize,
    last_submission: Option<usize>,
}

impl ChannelState {
    pub fn new(tau: usize) -> Self {
        Self {
            tau,
            in_flight: VecDeque::new(),
            last_update: None,
            last_stamp: INITIAL_STAMP,
            aoi: 0,
            next_delivery: 0,
            last_submission: None,
        }
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// `c(k)`: arrival time of the freshest delivered packet, if any.
    pub fn last_update(&self) -> Option<usize> {
        self.last_update
    }

    /// `s(k)`: generation time of the freshest information at the controller.
    pub fn last_stamp(&self) -> i64 {
        self.last_stamp
    }

    /// `Delta_k` as of the last [`deliver`](Self::deliver) call.
    pub fn aoi(&self) -> usize {
        self.aoi
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Queues `x` for arrival at `k + tau` when `decision` is set.
    pub fn submit(&mut self, k: usize, decision: bool, x: &StateVector) -> Result<()> {
        if let Some(prev) = self.last_submission {
            if k <= prev {
                return Err(Error::Protocol(format!(
                    "submission at k={k} after submission at k={prev}"
                )));
            }
        }
        if x.k != k as i64 {
            return Err(Error::Protocol(format!(
                "state stamped {} submitted at k={k}",
                x.k
            )));
        }
        self.last_submission = Some(k);
        if decision {
            let arrival = k + self.tau;
            debug_assert!(self.in_flight.back().is_none_or(|(t, _)| *t < arrival));
            self.in_flight.push_back((
                arrival,
                Packet {
                    stamp: k,
                    payload: x.clone(),
                },
            ));
        }
        Ok(())
    }

    /// Hands over the packet arriving at `k`, if any, and updates the AoI.
    /// Must be called once per step with consecutive `k` starting at 0.
    pub fn deliver(&mut self, k: usize) -> Result<Option<Packet>> {
        if k != self.next_delivery {
            return Err(Error::Protocol(format!(
                "deliver called for k={k}, expected k={}",
                self.next_delivery
            )));
        }
        self.next_delivery += 1;
        let due = matches!(self.in_flight.front(), Some((t, _)) if *t == k);
        let packet = if due {
            let (_, pkt) = self.in_flight.pop_front().expect("front checked");
            self.last_update = Some(k);
            self.last_stamp = (k - self.tau) as i64;
            Some(pkt)
        } else {
            None
        };
        let recursive = advance_aoi(self.aoi, packet.is_some(), self.tau);
        self.aoi = (k as i64 - self.last_stamp) as usize;
        debug_assert_eq!(recursive, self.aoi);
        Ok(packet)
    }
}

/// One-step AoI recursion: `tau` after a delivery, otherwise one step staler.
pub fn advance_aoi(prev: usize, delivered: bool, tau: usize) -> usize {
    if delivered {
        tau
    } else {
        prev + 1
    }
}

/// One row of the channel timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRecord {
    pub k: usize,
    pub decision: bool,
    pub delivered: bool,
    pub stamp: i64,
    pub aoi: usize,
}

/// Writes `k,delta,delivered,s,aoi` rows.
pub fn write_channel_trace(records: &[ChannelRecord], path: &Path) -> Result<()> {
    let mut out = String::from("k,delta,delivered,s,aoi\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k, r.decision as u8, r.delivered as u8, r.stamp, r.aoi
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
