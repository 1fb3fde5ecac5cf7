use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use crate::error::{Error, Result};
use crate::model::ObjectiveWeights;

pub const CURVE_HEADER: &str = "step,stage,lr,pixel_l1,latent_l1,perceptual,caption_ce,contrastive,weighted_total";

/// Component losses of one step and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: usize,
    pub lr: f64,
    pub pixel_l1: f64,
    pub latent_l1: f64,
    pub perceptual: f64,
    pub caption_ce: f64,
    pub contrastive: f64,
    pub weighted_total: f64,
}

pub const COMPONENTS: [&str; 6] = ["pixel_l1", "latent_l1", "perceptual", "caption_ce", "contrastive", "weighted_total"];

impl LossReport {
    /// `[pixel, latent, perceptual, caption, contrastive]` plus the weighted
    /// total, which is the full objective whatever the training mode.
    pub fn compose(step: usize, stage: usize, lr: f64, c: [f64; 5], w: ObjectiveWeights) -> Self {
        let [pixel_l1, latent_l1, perceptual, caption_ce, contrastive] = c;
        let weighted_total = w.omega_rec * (pixel_l1 + w.beta * latent_l1 + w.lambda * perceptual)
            + w.omega_und * (caption_ce + w.alpha * contrastive);
        Self { step, stage, lr, pixel_l1, latent_l1, perceptual, caption_ce, contrastive, weighted_total }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        Some(match name {
            "pixel_l1" => self.pixel_l1,
            "latent_l1" => self.latent_l1,
            "perceptual" => self.perceptual,
            "caption_ce" => self.caption_ce,
            "contrastive" => self.contrastive,
            "weighted_total" => self.weighted_total,
            _ => return None,
        })
    }

    pub(crate) fn check_finite(&self, step: usize) -> Result<()> {
        for (component, v) in [
            ("pixel_l1", self.pixel_l1),
            ("latent_l1", self.latent_l1),
            ("perceptual", self.perceptual),
            ("caption_ce", self.caption_ce),
            ("contrastive", self.contrastive),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { component, step });
            }
        }
        Ok(())
    }
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    }
}

/// Streams reports to a curve CSV, flushing each row.
pub struct CurveWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl CurveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = writer(file);
        inner.write_record(CURVE_HEADER.split(',')).map_err(csv_err(path))?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { inner, path: path.to_path_buf() })
    }

    pub fn push(&mut self, r: &LossReport) -> Result<()> {
        let p = &self.path;
        self.inner.serialize(r).map_err(csv_err(p))?;
        self.inner.flush().map_err(|e| Error::io(p, e))
    }
}

pub fn write_curves(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut w = CurveWriter::create(path)?;
    for r in reports {
        w.push(r)?;
    }
    Ok(())
}

/// Parses a curve CSV; the header must match [`CURVE_HEADER`].
pub fn read_curves(text: &str) -> Result<Vec<LossReport>> {
    let bad = |line: usize, msg: String| Error::Config { line, msg };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == CURVE_HEADER => {}
        _ => return Err(bad(1, format!("expected header `{CURVE_HEADER}`"))),
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<LossReport>().enumerate() {
        out.push(row.map_err(|e| bad(i + 2, e.to_string()))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub initial: f64,
    pub r#final: f64,
    pub ratio: f64,
}

/// Per mode and component: first value, last value and their ratio.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub modes: BTreeMap<String, BTreeMap<String, ComponentSummary>>,
}

impl AblationSummary {
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = (Mode, &'a [LossReport])>) -> Self {
        let mut modes = BTreeMap::new();
        for (mode, log) in runs {
            let (Some(first), Some(last)) = (log.first(), log.last()) else { continue };
            let comps = COMPONENTS
                .iter()
                .map(|&c| {
                    let (a, b) = (first.component(c).expect("known"), last.component(c).expect("known"));
                    let ratio = if a != 0.0 { b / a } else { f64::NAN };
                    (c.to_string(), ComponentSummary { initial: a, r#final: b, ratio })
                })
                .collect();
            modes.insert(mode.name().to_string(), comps);
        }
        Self { modes }
    }

    pub fn get(&self, mode: Mode, component: &str) -> Option<ComponentSummary> {
        self.modes.get(mode.name())?.get(component).copied()
    }
}
