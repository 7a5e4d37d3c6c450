use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use scbr_core::envelope::{decode_frame, encode_frame, FrameError, Record};

use crate::{resolve, NetError, MAX_FRAME_BYTES};

pub(crate) enum Line {
    Frame,
    Oversize,
    Eof,
}

/// Read one line into `buf` without its terminator. Lines longer than
/// [`MAX_FRAME_BYTES`] are consumed and reported as `Oversize`.
pub(crate) fn read_line<R: BufRead>(r: &mut R, buf: &mut Vec<u8>) -> io::Result<Line> {
    buf.clear();
    let n = r.by_ref().take(MAX_FRAME_BYTES as u64 + 1).read_until(b'\n', buf)?;
    if n == 0 {
        return Ok(Line::Eof);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
        return Ok(Line::Frame);
    }
    if buf.len() <= MAX_FRAME_BYTES {
        return Ok(Line::Frame);
    }
    loop {
        buf.clear();
        let n = r.by_ref().take(1 << 16).read_until(b'\n', buf)?;
        if n == 0 || buf.last() == Some(&b'\n') {
            buf.clear();
            return Ok(Line::Oversize);
        }
    }
}

pub(crate) fn parse_line(line: &[u8]) -> Result<Record, FrameError> {
    let text = std::str::from_utf8(line).map_err(|_| FrameError {
        field: "frame".into(),
        reason: "not UTF-8".into(),
    })?;
    decode_frame(text)
}

pub(crate) fn frame_bytes(r: &Record) -> Vec<u8> {
    let mut line = encode_frame(r).into_bytes();
    line.push(b'\n');
    line
}

pub(crate) fn connect(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let stream = TcpStream::connect_timeout(&resolve(addr)?, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

/// A synchronous request/response connection.
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    buf: Vec<u8>,
}

impl Connection {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, NetError> {
        let writer = connect(addr, timeout)?;
        Ok(Connection {
            reader: BufReader::new(writer.try_clone()?),
            writer,
            buf: Vec::new(),
        })
    }

    pub fn send(&mut self, r: &Record) -> Result<(), NetError> {
        self.send_raw(&frame_bytes(r))
    }

    /// Write bytes as-is; the caller supplies any newline.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), NetError> {
        self.writer.write_all(bytes)?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Record, NetError> {
        match read_line(&mut self.reader, &mut self.buf)? {
            Line::Eof => Err(NetError::Closed),
            Line::Oversize => Err(NetError::Unexpected("oversized")),
            Line::Frame => Ok(parse_line(&self.buf)?),
        }
    }

    pub fn request(&mut self, r: &Record) -> Result<Record, NetError> {
        self.send(r)?;
        self.recv()
    }

    pub fn set_timeout(&mut self, timeout: Duration) -> Result<(), NetError> {
        self.writer.set_read_timeout(Some(timeout))?;
        self.writer.set_write_timeout(Some(timeout))?;
        Ok(())
    }

    pub fn try_clone_stream(&self) -> io::Result<TcpStream> {
        self.writer.try_clone()
    }
}
