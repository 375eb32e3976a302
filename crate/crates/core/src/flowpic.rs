//! Time × packet-size histograms ("flowpics") and their model-ready form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{PacketSeries, MAX_PACKET_SIZE};

pub const DEFAULT_WINDOW: f64 = 15.0;
pub const DEFAULT_RESOLUTION: usize = 32;

/// Square count matrix. Rows are packet-size bins (row 0 holds the smallest
/// sizes), columns are time bins (column 0 is the start of the window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flowpic {
    resolution: usize,
    window: f64,
    counts: Vec<u32>,
}

impl Flowpic {
    pub fn zeros(resolution: usize, window: f64) -> Self {
        Self {
            resolution,
            window,
            counts: vec![0; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    /// Row-major counts.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.resolution + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Comma-separated rows, row 0 first.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.counts.chunks(self.resolution) {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain (ASCII) PGM; darker pixels hold more packets, row 0 on top.
    pub fn to_pgm(&self) -> String {
        let max = self.max().max(1) as f64;
        let mut out = format!("P2\n{} {}\n255\n", self.resolution, self.resolution);
        for row in self.counts.chunks(self.resolution) {
            let line: Vec<String> = row
                .iter()
                .map(|&c| (255.0 - (c as f64 / max * 255.0).round()).to_string())
                .collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

/// Bins the packets of `series` falling in `[0, window)` into a
/// `resolution × resolution` count matrix.
///
/// Time bin width is `window / resolution` and size bin width is
/// `1500 / resolution`; a 1500 B packet lands in the last row.
///
/// # Panics
///
/// If `resolution < 2` or `window` is not a positive finite number.
pub fn build_flowpic(series: &PacketSeries, resolution: usize, window: f64) -> Flowpic {
    assert!(resolution >= 2, "flowpic resolution must be >= 2");
    assert!(window > 0.0 && window.is_finite(), "flowpic window must be positive");
    let mut fp = Flowpic::zeros(resolution, window);
    let res = resolution as f64;
    let last = resolution - 1;
    for (&t, &s) in series.timestamps().iter().zip(series.sizes()) {
        if !(0.0..window).contains(&t) {
            continue;
        }
        // Multiplying before dividing keeps bin edges nested across
        // resolutions that differ by a power of two.
        let col = ((t * res / window).floor() as usize).min(last);
        let row = ((s as f64 * res / MAX_PACKET_SIZE as f64).floor() as usize).min(last);
        fp.counts[row * resolution + col] += 1;
    }
    fp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Raw,
    UnitMax,
}

/// Real-valued square image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn from_vec(size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), size * size, "image data length mismatch");
        Self { size, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.size + col] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

pub fn to_model_input(fp: &Flowpic, normalization: Normalization) -> Image {
    let data = match normalization {
        Normalization::Raw => fp.counts.iter().map(|&c| c as f32).collect(),
        Normalization::UnitMax => {
            let m = fp.max().max(1) as f32;
            fp.counts.iter().map(|&c| c as f32 / m).collect()
        }
    };
    Image {
        size: fp.resolution,
        data,
    }
}

/// Flowpic construction parameters shared by the training pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowpicConfig {
    pub resolution: usize,
    pub window: f64,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for FlowpicConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            window: DEFAULT_WINDOW,
            normalization: Normalization::Raw,
        }
    }
}

impl FlowpicConfig {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn image(&self, series: &PacketSeries) -> Image {
        to_model_input(&build_flowpic(series, self.resolution, self.window), self.normalization)
    }
}
