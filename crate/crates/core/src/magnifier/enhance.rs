//! Upscaling back ends for magnified crops.

use std::time::Duration;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::remote::{decode_png_base64, png_base64, JsonClient};

pub trait Enhancer: Send + Sync {
    /// Returns an image of exactly `scale` times the input dimensions.
    fn upscale(&self, crop: &RgbImage, scale: u32) -> Result<RgbImage>;
}

/// Bicubic (Catmull-Rom) resampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bicubic;

impl Enhancer for Bicubic {
    fn upscale(&self, crop: &RgbImage, scale: u32) -> Result<RgbImage> {
        if scale == 0 {
            return Err(Error::Validation("scale must be positive".into()));
        }
        Ok(imageops::resize(
            crop,
            crop.width() * scale,
            crop.height() * scale,
            FilterType::CatmullRom,
        ))
    }
}

#[derive(Serialize)]
struct EnhanceRequest {
    image: String,
    scale: u32,
}

#[derive(Deserialize)]
struct EnhanceResponse {
    image: String,
}

/// Remote super-resolution speaking `POST {image, scale} -> {image}`.
#[derive(Debug, Clone)]
pub struct HttpEnhancer {
    client: JsonClient,
}

impl HttpEnhancer {
    pub fn new(url: impl Into<String>, timeout: Duration) -> HttpEnhancer {
        HttpEnhancer {
            client: JsonClient::new(url, timeout),
        }
    }

    pub fn with_bearer(mut self, token: Option<String>) -> HttpEnhancer {
        self.client = self.client.with_bearer(token);
        self
    }
}

impl Enhancer for HttpEnhancer {
    fn upscale(&self, crop: &RgbImage, scale: u32) -> Result<RgbImage> {
        let response: EnhanceResponse = self.client.post(&EnhanceRequest {
            image: png_base64(crop)?,
            scale,
        })?;
        decode_png_base64(&response.image)
    }
}
