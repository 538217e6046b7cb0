//! Rendering saliency maps as 8-bit portable graymaps or pixmaps.

use std::fmt;
use std::str::FromStr;

use crate::aggregate::SaliencyMap;
use crate::error::{invalid, Result};
use crate::io::pnm::Pnm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// Single-channel P5.
    #[default]
    Gray,
    /// P6 through [`HEAT_LUT`].
    Heat,
}

impl FromStr for Colormap {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grey" => Ok(Colormap::Gray),
            "heat" => Ok(Colormap::Heat),
            _ => Err(invalid(format!("unknown colormap '{s}'"))),
        }
    }
}

impl fmt::Display for Colormap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Colormap::Gray => "gray",
            Colormap::Heat => "heat",
        })
    }
}

const fn heat_entry(i: usize) -> [u8; 3] {
    let r = (i % 64 * 4) as u8;
    match i / 64 {
        0 => [0, 0, r],
        1 => [0, r, 255],
        2 => [r, 255, 255 - r],
        _ => [255, 255 - r, 0],
    }
}

const fn build_heat_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        lut[i] = heat_entry(i);
        i += 1;
    }
    lut
}

/// Black, blue, cyan, yellow, red.
pub const HEAT_LUT: [[u8; 3]; 256] = build_heat_lut();

/// Min-max normalised map quantised to `0..=255`.
pub fn quantize(map: &SaliencyMap) -> Vec<u8> {
    map.min_max_normalized().values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn render(map: &SaliencyMap, colormap: Colormap) -> Pnm {
    let levels = quantize(map);
    let (channels, pixels) = match colormap {
        Colormap::Gray => (1, levels),
        Colormap::Heat => (3, levels.iter().flat_map(|&l| HEAT_LUT[l as usize]).collect()),
    };
    Pnm { width: map.width, height: map.height, channels, pixels }
}
