//! In-memory interactive sessions, independent of the HTTP layer.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use hfn_core::training::preprocess_image;
use hfn_core::{ClickSet, Coord, Hfn, HfnError, ModelParameters};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Uploads are resized so their long axis is at most this many pixels.
pub const MAX_LONG_AXIS: usize = 512;

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("click ({row}, {col}) is outside the {height}x{width} image")]
    OutOfBounds { row: usize, col: usize, height: usize, width: usize },
    #[error("a click already exists at ({row}, {col})")]
    DuplicateClick { row: usize, col: usize },
    #[error("session has no clicks to undo")]
    NothingToUndo,
    #[error("segmentation failed: {0}")]
    Inference(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClickLabel {
    #[serde(rename = "fg", alias = "foreground")]
    Foreground,
    #[serde(rename = "bg", alias = "background")]
    Background,
}

impl ClickLabel {
    fn name(self) -> &'static str {
        match self {
            ClickLabel::Foreground => "foreground",
            ClickLabel::Background => "background",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledClick {
    pub row: usize,
    pub col: usize,
    pub label: ClickLabel,
}

/// One segmentation result.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub png: Vec<u8>,
    pub mean_probability: f64,
    pub foreground_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickResponse {
    /// `"segmented"`, or `"awaiting foreground click"` / `"awaiting background click"`.
    pub status: String,
    pub mask_png_b64: Option<String>,
    pub n_fg: usize,
    pub n_bg: usize,
    pub height: usize,
    pub width: usize,
    pub mean_probability: Option<f64>,
    pub foreground_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub clicks: Vec<LabeledClick>,
    pub n_fg: usize,
    pub n_bg: usize,
    pub mask_png_b64: Option<String>,
    pub mask_history_len: usize,
    pub created_at_unix: u64,
}

pub struct Session {
    pub id: String,
    pub image: RgbImage,
    pub clicks: Vec<LabeledClick>,
    pub mask_history: Vec<MaskResult>,
    /// The mask for the current click list, if both sides are present.
    pub latest: Option<MaskResult>,
    pub created_at: SystemTime,
}

impl Session {
    pub fn dims(&self) -> (usize, usize) {
        (self.image.height() as usize, self.image.width() as usize)
    }

    pub fn counts(&self) -> (usize, usize) {
        let fg = self.clicks.iter().filter(|c| c.label == ClickLabel::Foreground).count();
        (fg, self.clicks.len() - fg)
    }

    pub fn click_set(&self) -> ClickSet {
        let pick = |l| self.clicks.iter().filter(|c| c.label == l).map(|c| Coord(c.row, c.col)).collect();
        ClickSet::new(pick(ClickLabel::Foreground), pick(ClickLabel::Background))
    }

    fn response(&self) -> ClickResponse {
        let (n_fg, n_bg) = self.counts();
        let (height, width) = self.dims();
        let status = match (n_fg, n_bg) {
            (0, _) => format!("awaiting {} click", ClickLabel::Foreground.name()),
            (_, 0) => format!("awaiting {} click", ClickLabel::Background.name()),
            _ => "segmented".to_string(),
        };
        ClickResponse {
            status,
            mask_png_b64: self.latest.as_ref().map(|m| BASE64.encode(&m.png)),
            n_fg,
            n_bg,
            height,
            width,
            mean_probability: self.latest.as_ref().map(|m| m.mean_probability),
            foreground_fraction: self.latest.as_ref().map(|m| m.foreground_fraction),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let (n_fg, n_bg) = self.counts();
        let (height, width) = self.dims();
        Snapshot {
            session_id: self.id.clone(),
            height,
            width,
            clicks: self.clicks.clone(),
            n_fg,
            n_bg,
            mask_png_b64: self.latest.as_ref().map(|m| BASE64.encode(&m.png)),
            mask_history_len: self.mask_history.len(),
            created_at_unix: self.created_at.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }
}

struct Slot {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Instant,
}

/// Model plus live sessions. Model parameters are shared read-only; each
/// session has its own lock so mutations within a session are serialized.
pub struct SessionStore {
    net: Arc<Hfn>,
    params: Arc<ModelParameters<f32>>,
    ttl: Duration,
    sessions: Mutex<HashMap<String, Slot>>,
}

pub fn decode_upload(bytes: &[u8]) -> Result<RgbImage, ServiceError> {
    let img = image::load_from_memory(bytes).map_err(|e| ServiceError::BadImage(e.to_string()))?.to_rgb8();
    preprocess_image(&img, MAX_LONG_AXIS).map_err(|e| ServiceError::BadImage(e.to_string()))
}

impl SessionStore {
    pub fn new(net: Hfn, params: ModelParameters<f32>, ttl: Duration) -> Result<Self, HfnError> {
        net.validate_params(&params)?;
        Ok(SessionStore { net: Arc::new(net), params: Arc::new(params), ttl, sessions: Mutex::new(HashMap::new()) })
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session map lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop sessions idle for longer than the TTL. Returns how many were removed.
    pub fn sweep(&self) -> usize {
        let now = Instant::now();
        let mut map = self.sessions.lock().expect("session map lock");
        let before = map.len();
        map.retain(|_, s| now.duration_since(s.last_used) <= self.ttl);
        before - map.len()
    }

    pub fn create(&self, image_bytes: &[u8]) -> Result<String, ServiceError> {
        let image = decode_upload(image_bytes)?;
        self.sweep();
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session {
            id: id.clone(),
            image,
            clicks: Vec::new(),
            mask_history: Vec::new(),
            latest: None,
            created_at: SystemTime::now(),
        };
        let slot = Slot { session: Arc::new(tokio::sync::Mutex::new(session)), last_used: Instant::now() };
        self.sessions.lock().expect("session map lock").insert(id.clone(), slot);
        Ok(id)
    }

    fn lookup(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ServiceError> {
        let mut map = self.sessions.lock().expect("session map lock");
        let now = Instant::now();
        match map.get_mut(id) {
            Some(slot) if now.duration_since(slot.last_used) <= self.ttl => {
                slot.last_used = now;
                Ok(slot.session.clone())
            }
            Some(_) => {
                map.remove(id);
                Err(ServiceError::UnknownSession(id.to_string()))
            }
            None => Err(ServiceError::UnknownSession(id.to_string())),
        }
    }

    pub fn delete(&self, id: &str) -> Result<(), ServiceError> {
        self.lookup(id)?;
        self.sessions.lock().expect("session map lock").remove(id);
        Ok(())
    }

    async fn segment(&self, session: &Session) -> Result<Option<MaskResult>, ServiceError> {
        let clicks = session.click_set();
        if clicks.foreground.is_empty() || clicks.background.is_empty() {
            return Ok(None);
        }
        let (net, params, image) = (self.net.clone(), self.params.clone(), session.image.clone());
        let pred = tokio::task::spawn_blocking(move || net.forward(&image, &clicks, &params))
            .await
            .map_err(|e| ServiceError::Inference(e.to_string()))?
            .map_err(|e| ServiceError::Inference(e.to_string()))?;
        let total = pred.mask.values().len().max(1) as f64;
        Ok(Some(MaskResult {
            png: pred.mask.to_png_bytes(),
            mean_probability: pred.mean_probability(),
            foreground_fraction: pred.mask.count_foreground() as f64 / total,
        }))
    }

    async fn refresh(&self, session: &mut Session) -> Result<(), ServiceError> {
        let result = self.segment(session).await?;
        if let Some(m) = &result {
            session.mask_history.push(m.clone());
        }
        session.latest = result;
        Ok(())
    }

    pub async fn add_click(&self, id: &str, click: LabeledClick) -> Result<ClickResponse, ServiceError> {
        let handle = self.lookup(id)?;
        let mut session = handle.lock().await;
        let (height, width) = session.dims();
        if click.row >= height || click.col >= width {
            return Err(ServiceError::OutOfBounds { row: click.row, col: click.col, height, width });
        }
        if session.clicks.iter().any(|c| c.row == click.row && c.col == click.col) {
            return Err(ServiceError::DuplicateClick { row: click.row, col: click.col });
        }
        session.clicks.push(click);
        if let Err(e) = self.refresh(&mut session).await {
            session.clicks.pop();
            return Err(e);
        }
        Ok(session.response())
    }

    pub async fn undo(&self, id: &str) -> Result<ClickResponse, ServiceError> {
        let handle = self.lookup(id)?;
        let mut session = handle.lock().await;
        let Some(removed) = session.clicks.pop() else {
            return Err(ServiceError::NothingToUndo);
        };
        if let Err(e) = self.refresh(&mut session).await {
            session.clicks.push(removed);
            return Err(e);
        }
        Ok(session.response())
    }

    pub async fn snapshot(&self, id: &str) -> Result<Snapshot, ServiceError> {
        let handle = self.lookup(id)?;
        let session = handle.lock().await;
        Ok(session.snapshot())
    }
}
