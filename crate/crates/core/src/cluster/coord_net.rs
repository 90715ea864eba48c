//! Coordination service over the messaging layer, so the coordinator can
//! run as its own process. `CoordServer` exposes an embedded
//! `Coordinator`; `CoordClient` implements `CoordService` against it.
//! Error variants travel as tagged strings and are decoded back.

use std::sync::{Arc, Mutex};

use crate::rpc::client::RpcClient;
use crate::rpc::op;
use crate::rpc::server::{ConnCtx, Handler};
use crate::rpc::RpcError;
use crate::transport::Connection;

use super::coordination::{CoordError, CoordService, Coordinator, Result};

fn encode_err(e: &CoordError) -> String {
    match e {
        CoordError::Unavailable => "coord:unavailable:".into(),
        CoordError::NodeExists(p) => format!("coord:node_exists:{p}"),
        CoordError::NoNode(p) => format!("coord:no_node:{p}"),
        CoordError::NoSession(s) => format!("coord:no_session:{s}"),
        CoordError::BadPath(p) => format!("coord:bad_path:{p}"),
    }
}

fn decode_err(msg: &str) -> CoordError {
    let Some(rest) = msg.strip_prefix("coord:") else {
        return CoordError::Unavailable;
    };
    let (tag, arg) = rest.split_once(':').unwrap_or((rest, ""));
    match tag {
        "node_exists" => CoordError::NodeExists(arg.into()),
        "no_node" => CoordError::NoNode(arg.into()),
        "no_session" => CoordError::NoSession(arg.parse().unwrap_or(0)),
        "bad_path" => CoordError::BadPath(arg.into()),
        _ => CoordError::Unavailable,
    }
}

fn encode_path(path: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + path.len());
    out.extend_from_slice(&(path.len() as u16).to_le_bytes());
    out.extend_from_slice(path.as_bytes());
    out
}

fn decode_path(buf: &[u8]) -> Option<(String, &[u8])> {
    if buf.len() < 2 {
        return None;
    }
    let len = u16::from_le_bytes(buf[0..2].try_into().unwrap()) as usize;
    let rest = &buf[2..];
    if rest.len() < len {
        return None;
    }
    let path = String::from_utf8(rest[..len].to_vec()).ok()?;
    Some((path, &rest[len..]))
}

/// Serves an embedded coordinator to remote masters and servers.
pub struct CoordServer {
    pub coordinator: Arc<Coordinator>,
}

impl CoordServer {
    pub fn new(coordinator: Arc<Coordinator>) -> Arc<CoordServer> {
        Arc::new(CoordServer { coordinator })
    }

    fn dispatch(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let c = &self.coordinator;
        let bad = || CoordError::BadPath("<malformed request>".into());
        match opcode {
            op::COORD_CREATE_SESSION => Ok(c.create_session()?.to_le_bytes().to_vec()),
            op::COORD_HEARTBEAT => {
                let s = u64::from_le_bytes(payload.try_into().map_err(|_| bad())?);
                c.heartbeat(s)?;
                Ok(Vec::new())
            }
            op::COORD_CLOSE_SESSION => {
                let s = u64::from_le_bytes(payload.try_into().map_err(|_| bad())?);
                c.close_session(s)?;
                Ok(Vec::new())
            }
            op::COORD_CREATE => {
                // [flags:1][session:8][path][data]; flag bit0 = ephemeral,
                // bit1 = sequential.
                if payload.len() < 9 {
                    return Err(bad());
                }
                let flags = payload[0];
                let session = u64::from_le_bytes(payload[1..9].try_into().unwrap());
                let (path, data) = decode_path(&payload[9..]).ok_or_else(bad)?;
                let ephemeral = (flags & 1 != 0).then_some(session);
                let final_path = c.create(&path, data, ephemeral, flags & 2 != 0)?;
                Ok(final_path.into_bytes())
            }
            op::COORD_DELETE => {
                let (path, _) = decode_path(payload).ok_or_else(bad)?;
                c.delete(&path)?;
                Ok(Vec::new())
            }
            op::COORD_GET => {
                let (path, _) = decode_path(payload).ok_or_else(bad)?;
                Ok(match c.get(&path)? {
                    Some(data) => {
                        let mut out = vec![1u8];
                        out.extend_from_slice(&data);
                        out
                    }
                    None => vec![0u8],
                })
            }
            op::COORD_SET => {
                let (path, data) = decode_path(payload).ok_or_else(bad)?;
                c.set(&path, data)?;
                Ok(Vec::new())
            }
            op::COORD_CHILDREN => {
                let (path, _) = decode_path(payload).ok_or_else(bad)?;
                let kids = c.children(&path)?;
                let mut out = (kids.len() as u32).to_le_bytes().to_vec();
                for k in kids {
                    out.extend_from_slice(&encode_path(&k));
                }
                Ok(out)
            }
            op::COORD_EXPIRE => {
                c.expire_sessions()?;
                Ok(Vec::new())
            }
            _ => Err(bad()),
        }
    }
}

impl Handler for CoordServer {
    fn handle(&self, _ctx: &ConnCtx, opcode: u8, payload: &[u8]) -> std::result::Result<Vec<u8>, String> {
        self.dispatch(opcode, payload).map_err(|e| encode_err(&e))
    }
}

/// Remote `CoordService`: one connection, one call at a time.
pub struct CoordClient {
    client: Mutex<RpcClient>,
}

impl CoordClient {
    pub fn connect(conn: Arc<dyn Connection>) -> std::result::Result<CoordClient, RpcError> {
        Ok(CoordClient {
            client: Mutex::new(RpcClient::connect(conn)?),
        })
    }

    fn call(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let mut client = self.client.lock().unwrap();
        match client.call(opcode, payload) {
            Ok(reply) => Ok(reply.payload),
            Err(RpcError::Remote(msg)) => Err(decode_err(&msg)),
            Err(_) => Err(CoordError::Unavailable),
        }
    }
}

impl CoordService for CoordClient {
    fn create_session(&self) -> Result<u64> {
        let reply = self.call(op::COORD_CREATE_SESSION, &[])?;
        reply
            .try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| CoordError::Unavailable)
    }

    fn heartbeat(&self, session: u64) -> Result<()> {
        self.call(op::COORD_HEARTBEAT, &session.to_le_bytes())?;
        Ok(())
    }

    fn close_session(&self, session: u64) -> Result<()> {
        self.call(op::COORD_CLOSE_SESSION, &session.to_le_bytes())?;
        Ok(())
    }

    fn create(
        &self,
        path: &str,
        data: &[u8],
        ephemeral: Option<u64>,
        sequential: bool,
    ) -> Result<String> {
        let mut payload = vec![0u8; 9];
        payload[0] = (ephemeral.is_some() as u8) | ((sequential as u8) << 1);
        payload[1..9].copy_from_slice(&ephemeral.unwrap_or(0).to_le_bytes());
        payload.extend_from_slice(&encode_path(path));
        payload.extend_from_slice(data);
        let reply = self.call(op::COORD_CREATE, &payload)?;
        String::from_utf8(reply).map_err(|_| CoordError::Unavailable)
    }

    fn delete(&self, path: &str) -> Result<()> {
        self.call(op::COORD_DELETE, &encode_path(path))?;
        Ok(())
    }

    fn get(&self, path: &str) -> Result<Option<Vec<u8>>> {
        let reply = self.call(op::COORD_GET, &encode_path(path))?;
        match reply.first() {
            Some(1) => Ok(Some(reply[1..].to_vec())),
            Some(0) => Ok(None),
            _ => Err(CoordError::Unavailable),
        }
    }

    fn set(&self, path: &str, data: &[u8]) -> Result<()> {
        let mut payload = encode_path(path);
        payload.extend_from_slice(data);
        self.call(op::COORD_SET, &payload)?;
        Ok(())
    }

    fn children(&self, path: &str) -> Result<Vec<String>> {
        let reply = self.call(op::COORD_CHILDREN, &encode_path(path))?;
        if reply.len() < 4 {
            return Err(CoordError::Unavailable);
        }
        let n = u32::from_le_bytes(reply[0..4].try_into().unwrap());
        let mut rest = &reply[4..];
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let (path, tail) = decode_path(rest).ok_or(CoordError::Unavailable)?;
            out.push(path);
            rest = tail;
        }
        Ok(out)
    }

    fn expire_sessions(&self) -> Result<()> {
        self.call(op::COORD_EXPIRE, &[])?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::coordination::{elect_master, CoordConfig, SystemClock};
    use crate::rpc::server::{RpcConfig, RpcServer};
    use crate::transport::inproc::InProcNetwork;
    use crate::transport::NetworkStats;

    fn remote_coord() -> (Arc<InProcNetwork>, Arc<RpcServer>, CoordClient) {
        let net = InProcNetwork::new();
        let coordinator = Coordinator::new(SystemClock::new(), CoordConfig::default());
        let rpc = Arc::new(RpcServer::start(CoordServer::new(coordinator), RpcConfig::default()));
        let listener = net.listen("coord", NetworkStats::new());
        let rpc2 = rpc.clone();
        std::thread::spawn(move || {
            while let Ok(conn) = listener.accept() {
                if rpc2.add_connection(conn).is_err() {
                    break;
                }
            }
        });
        let conn = net.connect("coord", NetworkStats::new()).unwrap();
        let client = CoordClient::connect(conn).unwrap();
        (net, rpc, client)
    }

    #[test]
    fn remote_sessions_nodes_and_children_roundtrip() {
        let (net, rpc, client) = remote_coord();
        let s = client.create_session().unwrap();
        client.heartbeat(s).unwrap();
        client.create("/servers/s1", b"addr1", Some(s), false).unwrap();
        client.set("/region_map", b"map").unwrap();
        assert_eq!(client.get("/region_map").unwrap().unwrap(), b"map");
        assert_eq!(client.get("/absent").unwrap(), None);
        assert_eq!(client.children("/servers").unwrap(), vec!["/servers/s1"]);
        // Errors arrive as typed variants, not strings.
        assert_eq!(
            client.create("/servers/s1", b"", Some(s), false),
            Err(CoordError::NodeExists("/servers/s1".into()))
        );
        assert_eq!(client.heartbeat(9999), Err(CoordError::NoSession(9999)));
        // Graceful close drops the ephemeral node.
        client.close_session(s).unwrap();
        assert_eq!(client.get("/servers/s1").unwrap(), None);
        rpc.shutdown();
        net.unlisten("coord");
    }

    #[test]
    fn election_works_through_the_wire() {
        let (net, rpc, client) = remote_coord();
        let s = client.create_session().unwrap();
        let won = elect_master(&client, s, 7).unwrap();
        assert_eq!(won.map(|m| m.master_id), Some(7));
        let s2 = client.create_session().unwrap();
        assert!(elect_master(&client, s2, 8).unwrap().is_none());
        rpc.shutdown();
        net.unlisten("coord");
    }
}
