//! Point-to-point FIFO message channels between numbered endpoints.
//!
//! [`SimNetwork`] is an in-memory single-threaded network used by the
//! simulator; [`ThreadEndpoint`]s form a mesh of real channels for the
//! threaded backend. Both hand out [`Link`]s so collectives are written once.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

#[derive(Clone, Copy, Debug, thiserror::Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("endpoint {at} timed out waiting for endpoint {from}")]
    Timeout { at: usize, from: usize },
    #[error("channel between {at} and {peer} is closed")]
    Closed { at: usize, peer: usize },
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(usize),
}

/// One endpoint's view of the network.
pub trait Link {
    fn id(&self) -> usize;

    fn send(&mut self, to: usize, msg: Vec<u8>) -> Result<(), TransportError>;

    /// Next message from `from`, in send order. `None` waits indefinitely.
    fn recv(&mut self, from: usize, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError>;
}

/// In-memory network. A receive on an empty channel cannot be satisfied
/// later in a single-threaded run, so it fails immediately as a timeout.
#[derive(Debug, Default)]
pub struct SimNetwork {
    endpoints: usize,
    queues: BTreeMap<(usize, usize), VecDeque<Vec<u8>>>,
    messages: u64,
    bytes: u64,
}

impl SimNetwork {
    pub fn new(endpoints: usize) -> Self {
        SimNetwork {
            endpoints,
            ..Default::default()
        }
    }

    pub fn endpoints(&self) -> usize {
        self.endpoints
    }

    pub fn link(&mut self, id: usize) -> SimLink<'_> {
        SimLink { net: self, id }
    }

    /// Messages sent but not yet received.
    pub fn in_flight(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes
    }

    fn check(&self, id: usize) -> Result<(), TransportError> {
        if id < self.endpoints {
            Ok(())
        } else {
            Err(TransportError::UnknownEndpoint(id))
        }
    }
}

pub struct SimLink<'a> {
    net: &'a mut SimNetwork,
    id: usize,
}

impl Link for SimLink<'_> {
    fn id(&self) -> usize {
        self.id
    }

    fn send(&mut self, to: usize, msg: Vec<u8>) -> Result<(), TransportError> {
        self.net.check(self.id)?;
        self.net.check(to)?;
        self.net.messages += 1;
        self.net.bytes += msg.len() as u64;
        self.net.queues.entry((self.id, to)).or_default().push_back(msg);
        Ok(())
    }

    fn recv(&mut self, from: usize, _timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        self.net.check(self.id)?;
        self.net.check(from)?;
        self.net
            .queues
            .get_mut(&(from, self.id))
            .and_then(VecDeque::pop_front)
            .ok_or(TransportError::Timeout { at: self.id, from })
    }
}

/// One endpoint of a fully connected mesh of unbounded channels. Dropping an
/// endpoint closes its outgoing channels.
#[derive(Debug)]
pub struct ThreadEndpoint {
    id: usize,
    outgoing: Vec<Sender<Vec<u8>>>,
    incoming: Vec<Receiver<Vec<u8>>>,
}

impl ThreadEndpoint {
    pub fn mesh(n: usize) -> Vec<ThreadEndpoint> {
        let mut senders: Vec<Vec<Option<Sender<Vec<u8>>>>> = (0..n).map(|_| vec![None; n]).collect();
        let mut receivers: Vec<Vec<Option<Receiver<Vec<u8>>>>> = (0..n).map(|_| vec![None; n]).collect();
        for from in 0..n {
            for to in 0..n {
                let (tx, rx) = crossbeam_channel::unbounded();
                senders[from][to] = Some(tx);
                receivers[to][from] = Some(rx);
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(id, (s, r))| ThreadEndpoint {
                id,
                outgoing: s.into_iter().map(|x| x.expect("filled")).collect(),
                incoming: r.into_iter().map(|x| x.expect("filled")).collect(),
            })
            .collect()
    }
}

impl Link for ThreadEndpoint {
    fn id(&self) -> usize {
        self.id
    }

    fn send(&mut self, to: usize, msg: Vec<u8>) -> Result<(), TransportError> {
        let tx = self.outgoing.get(to).ok_or(TransportError::UnknownEndpoint(to))?;
        tx.send(msg)
            .map_err(|_| TransportError::Closed { at: self.id, peer: to })
    }

    fn recv(&mut self, from: usize, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        let rx = self.incoming.get(from).ok_or(TransportError::UnknownEndpoint(from))?;
        let closed = TransportError::Closed {
            at: self.id,
            peer: from,
        };
        match timeout {
            None => rx.recv().map_err(|_| closed),
            Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout { at: self.id, from },
                RecvTimeoutError::Disconnected => closed,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_channels_are_fifo_per_pair() {
        let mut net = SimNetwork::new(3);
        net.link(0).send(2, vec![1]).unwrap();
        net.link(1).send(2, vec![9]).unwrap();
        net.link(0).send(2, vec![2]).unwrap();
        let mut l = net.link(2);
        assert_eq!(l.recv(0, None).unwrap(), vec![1]);
        assert_eq!(l.recv(0, None).unwrap(), vec![2]);
        assert_eq!(l.recv(0, None), Err(TransportError::Timeout { at: 2, from: 0 }));
        assert_eq!(l.recv(1, None).unwrap(), vec![9]);
        assert_eq!(net.in_flight(), 0);
        assert_eq!(net.messages_sent(), 3);
        assert_eq!(net.link(0).send(5, vec![]), Err(TransportError::UnknownEndpoint(5)));
    }

    #[test]
    fn thread_mesh_timeout_and_closure_differ() {
        let mut eps = ThreadEndpoint::mesh(2);
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        a.send(1, vec![7]).unwrap();
        assert_eq!(b.recv(0, Some(Duration::from_millis(10))).unwrap(), vec![7]);
        assert_eq!(
            b.recv(0, Some(Duration::from_millis(10))),
            Err(TransportError::Timeout { at: 1, from: 0 })
        );
        drop(a);
        assert_eq!(
            b.recv(0, Some(Duration::from_millis(10))),
            Err(TransportError::Closed { at: 1, peer: 0 })
        );
        assert_eq!(b.send(0, vec![]), Err(TransportError::Closed { at: 1, peer: 0 }));
    }

    #[test]
    fn thread_mesh_across_threads() {
        let mut eps = ThreadEndpoint::mesh(2);
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        let h = std::thread::spawn(move || {
            let m = b.recv(0, None).unwrap();
            b.send(0, m.iter().map(|x| x * 2).collect()).unwrap();
        });
        a.send(1, vec![1, 2, 3]).unwrap();
        assert_eq!(a.recv(1, None).unwrap(), vec![2, 4, 6]);
        h.join().unwrap();
    }
}
