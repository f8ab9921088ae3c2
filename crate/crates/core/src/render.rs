//! The frozen caption-to-image generator: rasterizes scene graphs with
//! closed-form glyph tests (no anti-aliasing) and an optional seeded jitter
//! of object centres.

use std::f64::consts::FRAC_1_SQRT_2;

use rand_distr::{Distribution, Normal};

use crate::caption::{parse_caption, Caption, SceneGraph, Vocab};
use crate::error::{Error, Result};
use crate::seed::{domain, rng_for};
use crate::world::{ground_truth_graph, Category, Color, Scene};

pub const CHANNELS: usize = 3;

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> RasterImage {
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        RasterImage {
            width,
            height,
            pixels,
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<RasterImage> {
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::Contract(format!(
                "{} values cannot fill a {width}x{height}x{CHANNELS} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.pixels[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<RasterImage> {
        let err = |detail: &str| Error::Format {
            kind: "PPM",
            detail: detail.to_string(),
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(err("truncated header"));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ASCII header"))?,
            );
        }
        if fields[0] != "P6" {
            return Err(err("expected magic P6"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(err("only maxval 255 is supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let n = width * height * CHANNELS;
        if bytes.len() < pos + n {
            return Err(err("truncated raster"));
        }
        if bytes.len() > pos + n {
            return Err(err("trailing bytes after raster"));
        }
        let pixels = bytes[pos..].iter().map(|&b| f64::from(b) / 255.0).collect();
        RasterImage::from_pixels(width, height, pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Exact,
    Jitter,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Jitter => "jitter",
        }
    }

    pub fn from_name(s: &str) -> Option<Backend> {
        match s {
            "exact" => Some(Backend::Exact),
            "jitter" => Some(Backend::Jitter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RendererConfig {
    pub backend: Backend,
    /// Standard deviation of the centre offset, as a fraction of the cell edge.
    pub jitter_sigma: f64,
    pub width: usize,
    pub height: usize,
    pub grid: usize,
    pub background: Color,
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            backend: Backend::Exact,
            jitter_sigma: 0.15,
            width: 64,
            height: 64,
            grid: 8,
            background: Color::Black,
        }
    }
}

impl RendererConfig {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn jitter(sigma: f64) -> Self {
        RendererConfig {
            backend: Backend::Jitter,
            jitter_sigma: sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "render.jitter_sigma must be a finite non-negative number, got {}",
                self.jitter_sigma
            )));
        }
        if self.grid == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("render dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        self.width as f64 / self.grid as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.height as f64 / self.grid as f64
    }

    fn effective_sigma(&self) -> f64 {
        match self.backend {
            Backend::Exact => 0.0,
            Backend::Jitter => self.jitter_sigma,
        }
    }
}

/// Whether offset `(dx, dy)` from the glyph centre lies inside a glyph of
/// radius `r`. `dy` grows downwards.
pub fn glyph_contains(category: Category, dx: f64, dy: f64, r: f64) -> bool {
    match category {
        Category::Circle => dx * dx + dy * dy <= r * r,
        Category::Square => dx.abs() <= r && dy.abs() <= r,
        Category::Triangle => dy >= -r && dy <= r && 2.0 * dx.abs() <= dy + r,
        // Union of a diamond and an axis-aligned square: an eight-pointed star.
        Category::Star => dx.abs() + dy.abs() <= r || dx.abs().max(dy.abs()) <= r * FRAC_1_SQRT_2,
    }
}

fn paint(img: &mut RasterImage, category: Category, rgb: [f64; 3], cx: f64, cy: f64, r: f64) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil().max(-1.0) as i64).min(img.width as i64 - 1);
    let y1 = ((cy + r).ceil().max(-1.0) as i64).min(img.height as i64 - 1);
    for y in y0 as i64..=y1 {
        for x in x0 as i64..=x1 {
            if glyph_contains(category, x as f64 - cx, y as f64 - cy, r) {
                img.set_pixel(x as usize, y as usize, rgb);
            }
        }
    }
}

fn draw(graph: &SceneGraph, config: &RendererConfig, background: Color, seed: u64) -> RasterImage {
    let mut img = RasterImage::filled(config.width, config.height, background.rgb());
    let (cw, ch) = (config.cell_width(), config.cell_height());
    let sigma = config.effective_sigma();
    for (index, object) in graph.objects.iter().enumerate() {
        let (color, size, (row, col)) = object.resolved(config.grid);
        let mut cx = (col as f64 + 0.5) * cw;
        let mut cy = (row as f64 + 0.5) * ch;
        if sigma > 0.0 {
            let mut rng = rng_for(&[domain::JITTER, seed, index as u64]);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            cx += normal.sample(&mut rng) * sigma * cw;
            cy += normal.sample(&mut rng) * sigma * ch;
        }
        let r = size.radius_fraction() * cw.min(ch);
        paint(&mut img, object.category, color.rgb(), cx, cy, r);
    }
    img
}

/// Draw `graph` on the configured canvas. Pure in `(graph, config, seed)`.
pub fn rasterize(graph: &SceneGraph, config: &RendererConfig, seed: u64) -> RasterImage {
    draw(graph, config, config.background, seed)
}

/// The original image of a scene: exact geometry on the scene's own background.
pub fn render_scene(scene: &Scene, config: &RendererConfig) -> RasterImage {
    let exact = RendererConfig {
        backend: Backend::Exact,
        ..config.clone()
    };
    draw(&ground_truth_graph(scene), &exact, scene.background, 0)
}

/// Caption-to-image mapping: parse then rasterize.
pub fn reconstruct(
    caption: &Caption,
    vocab: &Vocab,
    config: &RendererConfig,
    seed: u64,
) -> RasterImage {
    rasterize(&parse_caption(caption, vocab), config, seed)
}
