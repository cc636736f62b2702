//! Ground truth, detections and token sidecars as exchanged on disk.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub class: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageAnnotations {
    pub page_id: String,
    /// `[width, height]`.
    pub size: [u32; 2],
    pub annotations: Vec<Annotation>,
}

impl PageAnnotations {
    /// Checks that every box lies within the page.
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.size;
        for a in &self.annotations {
            if a.bbox.x1() > w || a.bbox.y1() > h {
                return Err(Error::InvalidPage(format!(
                    "annotation {} outside {w}×{h} page `{}`",
                    a.bbox, self.page_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub bbox: BBox,
    pub class: String,
    pub score: f64,
}

/// OCR tokens of one region, in reading order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRegion {
    pub bbox: BBox,
    pub tokens: Vec<String>,
}

pub type TokenSidecar = Vec<TokenRegion>;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}
