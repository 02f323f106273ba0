use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::model::*;
use super::EmulatorError;
use crate::enforce::FlowRef;

/// Operations the daemon and the experiment harness need from a 5G stack.
pub trait EmulatorClient: Send + Sync {
    fn create_radio_link(&self) -> Result<RadioLink, EmulatorError>;
    fn delete_radio_link(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError>;
    fn radio_links(&self) -> Result<Vec<RadioLink>, EmulatorError>;
    fn create_pdu_session(&self, radio_link_id: &str) -> Result<PduSession, EmulatorError>;
    fn delete_pdu_session(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError>;
    fn pdu_sessions(&self) -> Result<Vec<PduSession>, EmulatorError>;
    fn create_qos_flow(&self, req: &CreateFlow) -> Result<QosFlow, EmulatorError>;
    fn delete_qos_flow(&self, flow: &FlowRef, opts: DeleteOpts) -> Result<(), EmulatorError>;
    fn qos_flows(&self) -> Result<Vec<QosFlow>, EmulatorError>;
    fn create_filter(&self, req: &CreateFilter) -> Result<MarkFilter, EmulatorError>;
    fn delete_filter(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError>;
    fn filters(&self) -> Result<Vec<MarkFilter>, EmulatorError>;
    fn classify(&self, mark: u32) -> Result<Classification, EmulatorError>;
    fn transmit(&self, req: &TransmitRequest) -> Result<Delivery, EmulatorError>;
    fn dump_tree(&self) -> Result<String, EmulatorError>;

    fn qos_flow(&self, flow: &FlowRef) -> Result<Option<QosFlow>, EmulatorError> {
        Ok(self.qos_flows()?.into_iter().find(|f| &f.flow_ref() == flow))
    }
}

impl EmulatorClient for Emulator {
    fn create_radio_link(&self) -> Result<RadioLink, EmulatorError> {
        Ok(Emulator::create_radio_link(self))
    }
    fn delete_radio_link(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        Emulator::delete_radio_link(self, id, opts)
    }
    fn radio_links(&self) -> Result<Vec<RadioLink>, EmulatorError> {
        Ok(Emulator::radio_links(self))
    }
    fn create_pdu_session(&self, radio_link_id: &str) -> Result<PduSession, EmulatorError> {
        Emulator::create_pdu_session(self, radio_link_id)
    }
    fn delete_pdu_session(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        Emulator::delete_pdu_session(self, id, opts)
    }
    fn pdu_sessions(&self) -> Result<Vec<PduSession>, EmulatorError> {
        Ok(Emulator::pdu_sessions(self))
    }
    fn create_qos_flow(&self, req: &CreateFlow) -> Result<QosFlow, EmulatorError> {
        Emulator::create_qos_flow(self, req)
    }
    fn delete_qos_flow(&self, flow: &FlowRef, opts: DeleteOpts) -> Result<(), EmulatorError> {
        Emulator::delete_qos_flow(self, flow, opts)
    }
    fn qos_flows(&self) -> Result<Vec<QosFlow>, EmulatorError> {
        Ok(Emulator::qos_flows(self))
    }
    fn qos_flow(&self, flow: &FlowRef) -> Result<Option<QosFlow>, EmulatorError> {
        match Emulator::qos_flow(self, flow) {
            Ok(f) => Ok(Some(f)),
            Err(EmulatorError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
    fn create_filter(&self, req: &CreateFilter) -> Result<MarkFilter, EmulatorError> {
        Emulator::create_filter(self, req)
    }
    fn delete_filter(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        Emulator::delete_filter(self, id, opts)
    }
    fn filters(&self) -> Result<Vec<MarkFilter>, EmulatorError> {
        Ok(Emulator::filters(self))
    }
    fn classify(&self, mark: u32) -> Result<Classification, EmulatorError> {
        Ok(Emulator::classify(self, mark))
    }
    fn transmit(&self, req: &TransmitRequest) -> Result<Delivery, EmulatorError> {
        Emulator::transmit(self, req)
    }
    fn dump_tree(&self) -> Result<String, EmulatorError> {
        Ok(Emulator::dump_tree(self))
    }
}

/// Control-plane path placeholder. Every call fails with `NotImplemented`.
#[derive(Debug, Default, Clone, Copy)]
pub struct AmfClient;

impl EmulatorClient for AmfClient {
    fn create_radio_link(&self) -> Result<RadioLink, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn delete_radio_link(&self, _: &str, _: DeleteOpts) -> Result<(), EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn radio_links(&self) -> Result<Vec<RadioLink>, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn create_pdu_session(&self, _: &str) -> Result<PduSession, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn delete_pdu_session(&self, _: &str, _: DeleteOpts) -> Result<(), EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn pdu_sessions(&self) -> Result<Vec<PduSession>, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn create_qos_flow(&self, _: &CreateFlow) -> Result<QosFlow, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn delete_qos_flow(&self, _: &FlowRef, _: DeleteOpts) -> Result<(), EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn qos_flows(&self) -> Result<Vec<QosFlow>, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn create_filter(&self, _: &CreateFilter) -> Result<MarkFilter, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn delete_filter(&self, _: &str, _: DeleteOpts) -> Result<(), EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn filters(&self) -> Result<Vec<MarkFilter>, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn classify(&self, _: u32) -> Result<Classification, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn transmit(&self, _: &TransmitRequest) -> Result<Delivery, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
    fn dump_tree(&self) -> Result<String, EmulatorError> {
        Err(EmulatorError::NotImplemented("AMF path"))
    }
}

/// Blocking client for the REST service in [`super::rest`].
#[derive(Debug, Clone)]
pub struct HttpEmulatorClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpEmulatorClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build();
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn healthz(&self) -> Result<(), EmulatorError> {
        let resp = self
            .agent
            .get(&format!("{}/healthz", self.base))
            .call()
            .map_err(|e| EmulatorError::Unreachable(e.to_string()))?;
        Self::read_unit(resp)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn delete_query(opts: DeleteOpts) -> String {
        format!("?cascade={}&idempotent={}", opts.cascade, opts.idempotent)
    }

    fn check(mut resp: ureq::http::Response<ureq::Body>) -> Result<ureq::http::Response<ureq::Body>, EmulatorError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmulatorError::Protocol(format!("status {status}: {e}")))?;
        let kind = body.get("error").and_then(|v| v.as_str()).unwrap_or("unknown");
        let message = body
            .get("message")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        Err(EmulatorError::from_kind(kind, message))
    }

    fn read<T: DeserializeOwned>(resp: ureq::http::Response<ureq::Body>) -> Result<T, EmulatorError> {
        Self::check(resp)?
            .body_mut()
            .read_json()
            .map_err(|e| EmulatorError::Protocol(e.to_string()))
    }

    fn read_unit(resp: ureq::http::Response<ureq::Body>) -> Result<(), EmulatorError> {
        Self::check(resp).map(|_| ())
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, EmulatorError> {
        let resp = self
            .agent
            .get(&self.url(path))
            .call()
            .map_err(|e| EmulatorError::Unreachable(e.to_string()))?;
        Self::read(resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, EmulatorError> {
        let resp = self
            .agent
            .post(&self.url(path))
            .send_json(body)
            .map_err(|e| EmulatorError::Unreachable(e.to_string()))?;
        Self::read(resp)
    }

    fn delete(&self, path: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        let resp = self
            .agent
            .delete(&format!("{}{}", self.url(path), Self::delete_query(opts)))
            .call()
            .map_err(|e| EmulatorError::Unreachable(e.to_string()))?;
        Self::read_unit(resp)
    }
}

impl EmulatorClient for HttpEmulatorClient {
    fn create_radio_link(&self) -> Result<RadioLink, EmulatorError> {
        self.post("/radio-links", &serde_json::json!({}))
    }
    fn delete_radio_link(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        self.delete(&format!("/radio-links/{id}"), opts)
    }
    fn radio_links(&self) -> Result<Vec<RadioLink>, EmulatorError> {
        self.get("/radio-links")
    }
    fn create_pdu_session(&self, radio_link_id: &str) -> Result<PduSession, EmulatorError> {
        self.post("/pdu-sessions", &serde_json::json!({ "radioLinkId": radio_link_id }))
    }
    fn delete_pdu_session(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        self.delete(&format!("/pdu-sessions/{id}"), opts)
    }
    fn pdu_sessions(&self) -> Result<Vec<PduSession>, EmulatorError> {
        self.get("/pdu-sessions")
    }
    fn create_qos_flow(&self, req: &CreateFlow) -> Result<QosFlow, EmulatorError> {
        self.post("/qos-flows", req)
    }
    fn delete_qos_flow(&self, flow: &FlowRef, opts: DeleteOpts) -> Result<(), EmulatorError> {
        self.delete(&format!("/qos-flows/{}/{}", flow.session_id, flow.qfi), opts)
    }
    fn qos_flows(&self) -> Result<Vec<QosFlow>, EmulatorError> {
        self.get("/qos-flows")
    }
    fn create_filter(&self, req: &CreateFilter) -> Result<MarkFilter, EmulatorError> {
        self.post("/filters", req)
    }
    fn delete_filter(&self, id: &str, opts: DeleteOpts) -> Result<(), EmulatorError> {
        self.delete(&format!("/filters/{id}"), opts)
    }
    fn filters(&self) -> Result<Vec<MarkFilter>, EmulatorError> {
        self.get("/filters")
    }
    fn classify(&self, mark: u32) -> Result<Classification, EmulatorError> {
        self.post("/classify", &serde_json::json!({ "mark": mark }))
    }
    fn transmit(&self, req: &TransmitRequest) -> Result<Delivery, EmulatorError> {
        self.post("/transmit", req)
    }
    fn dump_tree(&self) -> Result<String, EmulatorError> {
        let resp = self
            .agent
            .get(&self.url("/tree"))
            .call()
            .map_err(|e| EmulatorError::Unreachable(e.to_string()))?;
        Self::check(resp)?
            .body_mut()
            .read_to_string()
            .map_err(|e| EmulatorError::Protocol(e.to_string()))
    }
}
