use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use super::frame::{Frame, Message, FRAME_OVERHEAD, HEADER_LEN};
use super::meter::{Direction, TrafficMeter};
use super::CommsError;

/// One side of a server-client link. Every message is encoded to a frame
/// before it leaves, so both transports account identical byte counts.
pub trait Endpoint: Send {
    fn send(&mut self, msg: &Message) -> Result<(), CommsError>;
    /// Blocks until a message arrives; `None` waits indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, CommsError>;
    fn meter(&self) -> &TrafficMeter;
}

fn wait<T>(rx: &Receiver<T>, timeout: Option<Duration>) -> Result<T, CommsError> {
    match timeout {
        None => rx.recv().map_err(|_| CommsError::Disconnected),
        Some(t) => rx.recv_timeout(t).map_err(|e| match e {
            RecvTimeoutError::Timeout => CommsError::Timeout,
            RecvTimeoutError::Disconnected => CommsError::Disconnected,
        }),
    }
}

pub struct InProcessEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    meter: TrafficMeter,
}

/// Two connected endpoints with independent meters.
pub fn in_process_pair() -> (InProcessEndpoint, InProcessEndpoint) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        InProcessEndpoint {
            tx: a_tx,
            rx: a_rx,
            meter: TrafficMeter::new(),
        },
        InProcessEndpoint {
            tx: b_tx,
            rx: b_rx,
            meter: TrafficMeter::new(),
        },
    )
}

impl Endpoint for InProcessEndpoint {
    fn send(&mut self, msg: &Message) -> Result<(), CommsError> {
        let bytes = msg.encode()?;
        let n = bytes.len();
        self.tx.send(bytes).map_err(|_| CommsError::Disconnected)?;
        self.meter.record(msg.round_index, Direction::Sent, n);
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, CommsError> {
        let bytes = wait(&self.rx, timeout)?;
        let msg = Message::decode(&bytes)?;
        self.meter.record(msg.round_index, Direction::Received, bytes.len());
        Ok(msg)
    }

    fn meter(&self) -> &TrafficMeter {
        &self.meter
    }
}

/// Framed messages over one TCP connection. A reader thread reassembles
/// whole frames so a receive timeout never leaves the stream mid-frame.
pub struct TcpEndpoint {
    stream: TcpStream,
    rx: Receiver<Result<Vec<u8>, CommsError>>,
    meter: TrafficMeter,
}

fn read_frame(stream: &mut TcpStream) -> Result<Vec<u8>, CommsError> {
    let mut header = [0u8; HEADER_LEN];
    stream.read_exact(&mut header)?;
    let (_, len) = Frame::parse_header(&header)?;
    let mut bytes = vec![0u8; FRAME_OVERHEAD + len as usize];
    bytes[..HEADER_LEN].copy_from_slice(&header);
    stream.read_exact(&mut bytes[HEADER_LEN..])?;
    Ok(bytes)
}

impl TcpEndpoint {
    pub fn new(stream: TcpStream) -> Result<Self, CommsError> {
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || loop {
            let frame = read_frame(&mut reader);
            let stop = frame.is_err();
            if tx.send(frame).is_err() || stop {
                break;
            }
        });
        Ok(Self {
            stream,
            rx,
            meter: TrafficMeter::new(),
        })
    }

    pub fn peer_addr(&self) -> String {
        self.stream.peer_addr().map(|a| a.to_string()).unwrap_or_default()
    }
}

pub fn connect_tcp(addr: impl ToSocketAddrs) -> Result<TcpEndpoint, CommsError> {
    TcpEndpoint::new(TcpStream::connect(addr)?)
}

impl Endpoint for TcpEndpoint {
    fn send(&mut self, msg: &Message) -> Result<(), CommsError> {
        let bytes = msg.encode()?;
        self.stream.write_all(&bytes)?;
        self.meter.record(msg.round_index, Direction::Sent, bytes.len());
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, CommsError> {
        let bytes = wait(&self.rx, timeout)??;
        let msg = Message::decode(&bytes)?;
        self.meter.record(msg.round_index, Direction::Received, bytes.len());
        Ok(msg)
    }

    fn meter(&self) -> &TrafficMeter {
        &self.meter
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::MessageKind;
    use std::net::TcpListener;

    #[test]
    fn meter_counts_payload_plus_overhead() {
        let (mut a, mut b) = in_process_pair();
        assert_eq!(a.meter().total(Direction::Sent), 0);
        let m = Message::new(MessageKind::Plan, "task", 4, vec![7; 33]);
        let payload = m.to_frame().payload.len();
        a.send(&m).unwrap();
        assert_eq!(b.recv(None).unwrap(), m);
        assert_eq!(a.meter().bytes(4, Direction::Sent), (payload + FRAME_OVERHEAD) as u64);
        assert_eq!(b.meter().bytes(4, Direction::Received), (payload + FRAME_OVERHEAD) as u64);
        assert_eq!(a.meter().bytes(3, Direction::Sent), 0);
    }

    #[test]
    fn in_process_timeout_and_disconnect() {
        let (mut a, b) = in_process_pair();
        assert_eq!(a.recv(Some(Duration::from_millis(5))), Err(CommsError::Timeout));
        drop(b);
        assert_eq!(a.recv(None), Err(CommsError::Disconnected));
        assert_eq!(a.send(&Message::stop("t")), Err(CommsError::Disconnected));
    }

    #[test]
    fn tcp_is_ordered_and_metered_like_in_process() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut ep = TcpEndpoint::new(s).unwrap();
            let got: Vec<Message> = (0..3).map(|_| ep.recv(None).unwrap()).collect();
            ep.send(&Message::stop("t")).unwrap();
            (got, ep.meter().total(Direction::Received))
        });
        let mut client = connect_tcp(addr).unwrap();
        let msgs: Vec<Message> = (0..3)
            .map(|i| Message::new(MessageKind::Upload, "t", i, vec![i as u8; 100 * i as usize]))
            .collect();
        for m in &msgs {
            client.send(m).unwrap();
        }
        assert_eq!(client.recv(None).unwrap().kind, MessageKind::Stop);
        let (got, received) = server.join().unwrap();
        assert_eq!(got, msgs);
        assert_eq!(received, client.meter().total(Direction::Sent));
        drop(client);
    }

    #[test]
    fn tcp_disconnect_surfaces() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let c = connect_tcp(addr).unwrap();
        let (s, _) = listener.accept().unwrap();
        let mut ep = TcpEndpoint::new(s).unwrap();
        drop(c);
        assert_eq!(ep.recv(Some(Duration::from_secs(5))), Err(CommsError::Disconnected));
    }
}
