use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{EditRequest, Editor};
use crate::error::{Error, Result};
use crate::image::Image;

/// Blocking JSON client for the diffusion service.
#[derive(Clone, Debug)]
pub(crate) struct RemoteClient {
    base: String,
    agent: ureq::Agent,
}

impl RemoteClient {
    pub(crate) fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub(crate) fn base(&self) -> &str {
        &self.base
    }

    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| transport(&url, e))?;
        read(&url, resp)
    }

    pub(crate) fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| transport(&url, e))?;
        read(&url, resp)
    }
}

fn transport(url: &str, e: ureq::Error) -> Error {
    match e {
        ureq::Error::Json(e) => Error::RemoteProtocolError(format!("{url}: {e}")),
        other => Error::RemoteUnavailable(format!("{url}: {other}")),
    }
}

fn read<R: DeserializeOwned>(url: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<R> {
    let status = resp.status();
    if status.as_u16() == 503 {
        return Err(Error::RemoteUnavailable(format!("{url}: status 503")));
    }
    if !status.is_success() {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(Error::RemoteProtocolError(format!(
            "{url}: status {status}: {text}"
        )));
    }
    resp.body_mut()
        .read_json::<R>()
        .map_err(|e| Error::RemoteProtocolError(format!("{url}: {e}")))
}

pub(crate) fn encode_png(img: &Image) -> Result<String> {
    Ok(STANDARD.encode(img.to_png_bytes()?))
}

pub(crate) fn decode_png(b64: &str) -> Result<Image> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| Error::RemoteProtocolError(format!("bad base64: {e}")))?;
    Image::from_png_bytes(&bytes).map_err(|e| Error::RemoteProtocolError(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct EditBody {
    pub instruction: String,
    pub conditioning_png: String,
    pub current_png: String,
    pub t: f64,
    pub ddim_steps: u32,
    pub guidance_image: f64,
    pub guidance_text: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct EditResponse {
    pub edited_png: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthInfo {
    pub model: String,
    pub mock: bool,
}

/// Editor backed by the diffusion service. Noise prediction is not part of
/// the protocol, so SDS is unavailable with this editor.
#[derive(Clone, Debug)]
pub struct RemoteEditor {
    client: RemoteClient,
}

impl RemoteEditor {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(300))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        Self {
            client: RemoteClient::new(base_url, timeout),
        }
    }

    pub fn health(&self) -> Result<HealthInfo> {
        self.client.get("/v1/health")
    }
}

impl Editor for RemoteEditor {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Image> {
        request.validate()?;
        let p = request.params;
        let body = EditBody {
            instruction: request.instruction.to_string(),
            conditioning_png: encode_png(request.conditioning)?,
            current_png: encode_png(request.current)?,
            t: request.t,
            ddim_steps: p.ddim_steps,
            guidance_image: p.guidance_image,
            guidance_text: p.guidance_text,
            seed: p.seed,
        };
        let resp: EditResponse = self.client.post("/v1/edit", &body)?;
        let img = decode_png(&resp.edited_png)?;
        if img.dims() != request.current.dims() {
            return Err(Error::RemoteProtocolError(format!(
                "edited image is {:?}, expected {:?}",
                img.dims(),
                request.current.dims()
            )));
        }
        Ok(img)
    }

    fn describe(&self) -> String {
        format!("remote({})", self.client.base())
    }
}
