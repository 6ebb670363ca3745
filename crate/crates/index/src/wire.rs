//! Framing and message types: a 4-byte big-endian length, then a UTF-8 JSON
//! body of at most [`MAX_BODY`] bytes.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

pub const MAX_BODY: usize = 16 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Search { embedding: Vec<f32>, k: usize },
    Add { id: u64, embedding: Vec<f32> },
    Stats {
        #[serde(default)]
        freeze: bool,
    },
    Ping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub ids: Vec<u64>,
    pub scores: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub n: usize,
    pub dim: usize,
    pub kind: String,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OkResponse {
    pub ok: bool,
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_BODY {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame exceeds 16 MiB"));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before a length prefix.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_BODY {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds 16 MiB")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn error_body(msg: impl Into<String>) -> Vec<u8> {
    serde_json::to_vec(&ErrorResponse { error: msg.into() }).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_json_shape() {
        let s = serde_json::to_string(&Request::Search { embedding: vec![0.5], k: 3 }).unwrap();
        assert_eq!(s, r#"{"op":"search","embedding":[0.5],"k":3}"#);
        let ping: Request = serde_json::from_str(r#"{"op":"ping"}"#).unwrap();
        assert_eq!(ping, Request::Ping);
        let stats: Request = serde_json::from_str(r#"{"op":"stats"}"#).unwrap();
        assert_eq!(stats, Request::Stats { freeze: false });
    }

    #[test]
    fn two_frames_read_back_in_order() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"first").unwrap();
        write_frame(&mut buf, b"second").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 5]);
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"first");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"second");
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn oversized_length_rejected() {
        let mut r: &[u8] = &((MAX_BODY as u32 + 1).to_be_bytes());
        assert_eq!(read_frame(&mut r).unwrap_err().kind(), io::ErrorKind::InvalidData);
    }
}
