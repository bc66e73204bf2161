use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{Endpoint, SimulatedSystem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogprobsRequest {
    pub prompt: String,
    pub candidates: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogprobsResponse {
    pub probs: Vec<(String, f64)>,
}

/// A running wire-protocol server backed by a simulator.
pub struct ServerHandle {
    server: Arc<Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `sim` over HTTP on `addr` (use port 0 for an ephemeral port).
/// Requests are handled serially.
pub fn serve(addr: &str, sim: SimulatedSystem) -> Result<ServerHandle> {
    let server = Server::http(addr).map_err(|e| Error::InvalidParameter(format!("cannot bind {addr}: {e}")))?;
    let addr =
        server.server_addr().to_ip().ok_or_else(|| Error::InvalidParameter(format!("{addr} is not an IP address")))?;
    let server = Arc::new(server);
    let sim = Arc::new(Mutex::new(sim));
    let worker = {
        let server = server.clone();
        thread::spawn(move || {
            for request in server.incoming_requests() {
                handle(request, &sim);
            }
        })
    };
    Ok(ServerHandle { server, addr, worker: Some(worker) })
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    Response::from_string(body).with_status_code(status).with_header(header)
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn handle(mut request: Request, sim: &Mutex<SimulatedSystem>) {
    let mut body = String::new();
    let (status, out) = if let Err(e) = request.as_reader().read_to_string(&mut body) {
        (400, error_body(&format!("unreadable body: {e}")))
    } else {
        let mut sim = sim.lock().unwrap_or_else(|e| e.into_inner());
        match (request.method(), request.url()) {
            (Method::Post, "/generate") => generate(&body, &mut sim),
            (Method::Post, "/logprobs") => logprobs(&body, &sim),
            _ => (404, error_body("not found")),
        }
    };
    let _ = request.respond(json_response(status, out));
}

fn generate(body: &str, sim: &mut SimulatedSystem) -> (u16, String) {
    let req: GenerateRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return (400, error_body(&format!("bad request: {e}"))),
    };
    if req.n == 0 {
        return (400, error_body("n must be >= 1"));
    }
    match sim.generate_batch(&req.prompt, req.n) {
        Ok(tokens) => (200, serde_json::to_string(&GenerateResponse { tokens }).expect("serializable")),
        Err(e) => (400, error_body(&e.to_string())),
    }
}

fn logprobs(body: &str, sim: &SimulatedSystem) -> (u16, String) {
    let req: LogprobsRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return (400, error_body(&format!("bad request: {e}"))),
    };
    let dist = match sim.full_distribution(&req.prompt) {
        Ok(d) => d,
        Err(e) => return (400, error_body(&e.to_string())),
    };
    let probs: Vec<(String, f64)> = match req.candidates {
        Some(candidates) => candidates
            .into_iter()
            .map(|c| {
                let p = dist.prob_of(&c);
                (c, p)
            })
            .collect(),
        None => dist.entries().iter().map(|(t, p)| (t.to_string(), *p)).collect(),
    };
    (200, serde_json::to_string(&LogprobsResponse { probs }).expect("serializable"))
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::blackbox::{remote_connect, simulate, RemoteConfig};
    use crate::distributions::{Categorical, DecodingStrategy};

    fn server() -> ServerHandle {
        let table = HashMap::from([(
            "m".to_string(),
            Categorical::from_weights([("a", 0.5), ("b", 0.3), ("c", 0.2)]).unwrap(),
        )]);
        serve("127.0.0.1:0", simulate(table, DecodingStrategy::top_k(2).unwrap(), 5).unwrap()).unwrap()
    }

    #[test]
    fn generate_over_the_wire() {
        let srv = server();
        let mut ep = remote_connect(RemoteConfig::new(srv.url())).unwrap();
        let tokens = ep.generate_batch("m", 200).unwrap();
        assert_eq!(tokens.len(), 200);
        assert!(tokens.iter().all(|t| t == "a" || t == "b"));
        assert!(matches!(ep.generate("nope"), Err(Error::HttpStatus { status: 400, .. })));
    }

    #[test]
    fn zero_samples_is_a_bad_request() {
        let srv = server();
        let resp = ureq::post(format!("{}/generate", srv.url()))
            .config()
            .http_status_as_error(false)
            .build()
            .send(r#"{"prompt":"m","n":0}"#)
            .unwrap();
        assert_eq!(resp.status().as_u16(), 400);
    }

    #[test]
    fn logprobs_are_untruncated() {
        let srv = server();
        let ep = remote_connect(RemoteConfig::new(srv.url())).unwrap();
        let all = ep.logprobs("m", None).unwrap();
        assert_eq!(all.len(), 3);
        let some = ep.logprobs("m", Some(&["c".to_string(), "zz".to_string()])).unwrap();
        assert_eq!(some, vec![("c".to_string(), 0.2), ("zz".to_string(), 0.0)]);
    }
}
