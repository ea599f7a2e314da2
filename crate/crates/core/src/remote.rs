//! Blocking JSON-over-HTTP plumbing shared by the remote adapters.

use std::io::Cursor;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use image::{ImageFormat, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{BackendErrorKind, Error, Result};

const MAX_RESPONSE_BYTES: u64 = 256 * 1024 * 1024;

/// POSTs JSON bodies to a single endpoint.
#[derive(Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    url: String,
    bearer: Option<String>,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient").field("url", &self.url).finish()
    }
}

impl JsonClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> JsonClient {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        JsonClient {
            agent: config.into(),
            url: url.into(),
            bearer: None,
        }
    }

    pub fn with_bearer(mut self, token: Option<String>) -> JsonClient {
        self.bearer = token;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R> {
        let mut request = self.agent.post(&self.url);
        if let Some(token) = &self.bearer {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| self.map_err(e))?;
        response
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_json::<R>()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) | ureq::Error::Io(_) => self.map_err(e),
                other => self.error(BackendErrorKind::Protocol, other.to_string()),
            })
    }

    fn map_err(&self, err: ureq::Error) -> Error {
        let kind = match &err {
            ureq::Error::StatusCode(code) => BackendErrorKind::Status(*code),
            ureq::Error::Timeout(_) => BackendErrorKind::Timeout,
            ureq::Error::Json(_) => BackendErrorKind::Protocol,
            _ => BackendErrorKind::Transport,
        };
        self.error(kind, err.to_string())
    }

    fn error(&self, kind: BackendErrorKind, message: String) -> Error {
        Error::Backend {
            kind,
            endpoint: self.url.clone(),
            message,
        }
    }
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn png_base64(image: &RgbImage) -> Result<String> {
    Ok(STANDARD.encode(encode_png(image)?))
}

pub fn decode_png_base64(data: &str) -> Result<RgbImage> {
    let bytes = STANDARD
        .decode(data.trim())
        .map_err(|e| Error::Validation(format!("invalid base64 image: {e}")))?;
    let image = image::load_from_memory(&bytes)?;
    Ok(image.to_rgb8())
}
