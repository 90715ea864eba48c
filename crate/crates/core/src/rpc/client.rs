//! Client side: writes requests into the server's circular buffer, polls
//! its own buffer for the reply.
//!
//! One call is outstanding at a time, so a consumed footprint in the
//! server's buffer is always free again by the time the cursor laps it:
//! the server consumes a request before replying, and the client does not
//! write again until the reply arrives.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::transport::{BufferHandle, BufferId, Connection};

use super::{
    compose_message, message_footprint, op, MessageHeader, Result, RpcError, DEFAULT_CLIENT_BUFFER,
    FLAG_CONTINUATION, FLAG_ERROR, HEADER_LEN, MAGIC, MAX_CLIENT_BUFFER, MESSAGE_SEGMENT,
    MIN_CLIENT_BUFFER, RECEIVE_FIELD_OFFSET, TAG_REPLY_BUFFER, TAG_REQUEST_BUFFER,
};

#[derive(Debug, Clone)]
pub struct Reply {
    pub flags: u8,
    pub payload: Vec<u8>,
}

pub struct RpcClient {
    conn: Arc<dyn Connection>,
    reply_buf: Arc<BufferHandle>,
    req_buf_id: BufferId,
    req_buf_len: u64,
    cursor: u64,
    next_req_id: u64,
    /// Footprint of the previous reply, zeroed before the next request so
    /// stale magic bytes can never satisfy the poll.
    last_reply_span: Option<(usize, usize)>,
    pub timeout: Duration,
}

impl RpcClient {
    pub fn connect(conn: Arc<dyn Connection>) -> Result<RpcClient> {
        RpcClient::connect_with_buffer(conn, DEFAULT_CLIENT_BUFFER)
    }

    pub fn connect_with_buffer(conn: Arc<dyn Connection>, reply_buffer: usize) -> Result<RpcClient> {
        assert!(
            (MIN_CLIENT_BUFFER..=MAX_CLIENT_BUFFER).contains(&reply_buffer)
                && reply_buffer % MESSAGE_SEGMENT == 0,
            "reply buffer must be a 128 B multiple in 16 KiB..=256 KiB"
        );
        let reply_buf = conn.register_buffer(reply_buffer, Some(TAG_REPLY_BUFFER))?;
        let (req_buf_id, req_buf_len) =
            conn.peer_buffer_by_tag(TAG_REQUEST_BUFFER, Duration::from_secs(5))?;
        Ok(RpcClient {
            conn,
            reply_buf,
            req_buf_id,
            req_buf_len,
            cursor: 0,
            next_req_id: 1,
            last_reply_span: None,
            timeout: Duration::from_secs(5),
        })
    }

    pub fn connection(&self) -> &Arc<dyn Connection> {
        &self.conn
    }

    /// Offset in the server's buffer where the next request will land.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn call(&mut self, opcode: u8, payload: &[u8]) -> Result<Reply> {
        let reply_len = self.reply_buf.len();
        self.call_with_reply_window(opcode, payload, reply_len)
    }

    /// Issue a request reserving only `reply_len` bytes of reply space.
    /// Oversized replies come back in continuation chunks and are
    /// reassembled here.
    pub fn call_with_reply_window(
        &mut self,
        opcode: u8,
        payload: &[u8],
        reply_len: usize,
    ) -> Result<Reply> {
        assert!(reply_len >= MESSAGE_SEGMENT && reply_len <= self.reply_buf.len());
        let req_id = self.send_request(opcode, payload, 0, reply_len)?;
        let (header, mut body) = self.poll_reply(0, reply_len)?;
        if header.flags & FLAG_ERROR != 0 {
            return Err(RpcError::Remote(String::from_utf8_lossy(&body).into_owned()));
        }
        if header.flags & FLAG_CONTINUATION == 0 {
            return Ok(Reply {
                flags: header.flags,
                payload: body,
            });
        }
        // First chunk of an oversized reply: [total_len:4][chunk].
        if body.len() < 4 {
            return Err(RpcError::Protocol("short continuation prologue".into()));
        }
        let total = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
        let mut assembled = body.split_off(4);
        while assembled.len() < total {
            let fetch_id = self.send_request(
                op::FETCH_CONTINUATION,
                &req_id.to_le_bytes(),
                0,
                reply_len,
            )?;
            let _ = fetch_id;
            let (h, chunk) = self.poll_reply(0, reply_len)?;
            if h.flags & FLAG_ERROR != 0 {
                return Err(RpcError::Remote(String::from_utf8_lossy(&chunk).into_owned()));
            }
            if chunk.is_empty() {
                return Err(RpcError::Protocol("empty continuation chunk".into()));
            }
            assembled.extend_from_slice(&chunk);
        }
        Ok(Reply {
            flags: 0,
            payload: assembled,
        })
    }

    fn send_request(
        &mut self,
        opcode: u8,
        payload: &[u8],
        reply_offset: u64,
        reply_len: usize,
    ) -> Result<u64> {
        let footprint = message_footprint(payload.len()) as u64;
        if footprint > self.req_buf_len {
            return Err(RpcError::BufferFull(payload.len()));
        }
        // Clear detection bytes of the previous reply before new space is
        // handed to the server.
        if let Some((off, len)) = self.last_reply_span.take() {
            self.reply_buf.write_local(off + RECEIVE_FIELD_OFFSET, &[0]);
            self.reply_buf.write_local(off + len - 1, &[0]);
        }
        if self.cursor + footprint > self.req_buf_len {
            self.reset_rendezvous()?;
        }
        let req_id = self.next_req_id;
        self.next_req_id += 1;
        let header = MessageHeader {
            payload_len: payload.len() as u32,
            op: opcode,
            flags: 0,
            reply_offset,
            reply_len: reply_len as u32,
            req_id,
        };
        let msg = compose_message(&header, payload);
        self.conn.remote_write(self.req_buf_id, self.cursor, &msg)?;
        self.cursor += footprint;
        if self.cursor == self.req_buf_len {
            // Implicit wrap: the last message ends exactly at the buffer end.
            self.cursor = 0;
        }
        Ok(req_id)
    }

    fn reset_rendezvous(&mut self) -> Result<()> {
        let header = MessageHeader {
            payload_len: 0,
            op: op::RESET_RENDEZVOUS,
            flags: 0,
            reply_offset: 0,
            reply_len: 0,
            req_id: 0,
        };
        let msg = compose_message(&header, &[]);
        self.conn.remote_write(self.req_buf_id, self.cursor, &msg)?;
        self.cursor = 0;
        Ok(())
    }

    fn poll_reply(&mut self, reply_offset: usize, reply_len: usize) -> Result<(MessageHeader, Vec<u8>)> {
        let deadline = Instant::now() + self.timeout;
        loop {
            if self.reply_buf.read_u8(reply_offset + RECEIVE_FIELD_OFFSET) == MAGIC {
                let header = MessageHeader::decode(&self.reply_buf.read(reply_offset, HEADER_LEN))?;
                let footprint = message_footprint(header.payload_len as usize);
                if footprint <= reply_len
                    && self.reply_buf.read_u8(reply_offset + footprint - 1) == MAGIC
                {
                    let body = self
                        .reply_buf
                        .read(reply_offset + HEADER_LEN, header.payload_len as usize);
                    self.last_reply_span = Some((reply_offset, footprint));
                    return Ok((header, body));
                }
            }
            if Instant::now() >= deadline {
                return Err(RpcError::Timeout);
            }
            std::hint::spin_loop();
            std::thread::yield_now();
        }
    }
}
