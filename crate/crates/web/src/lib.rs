//! Browser bindings. Each exported function has a plain counterpart that the
//! native tests exercise.

use wasm_bindgen::prelude::*;

use restr_core::config::{FusionVariant, ModelConfig, TrainConfig};
use restr_core::data::generate_scenes;
use restr_core::fusion::profile;
use restr_core::train::{lr_at, patch_labels};
use restr_core::Result;

fn js(e: restr_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A scene with one of its two expressions, as RGBA pixels. The referred
/// object is tinted; patches whose label is 1 at `tau` get a white frame.
pub struct SceneView {
    pub size: usize,
    pub expression: String,
    pub positives: usize,
    pub rgba: Vec<u8>,
}

pub fn scene_view(seed: u32, size: usize, patch: usize, tau: f64, which: usize) -> Result<SceneView> {
    let mut pair = generate_scenes(seed as u64, 2, size, size)?;
    let g = pair.swap_remove(which.min(1));
    let image = g.scene.render();
    let mask = g.scene.mask(g.target);
    let labels = patch_labels(&mask, patch, tau)?;
    let grid = size / patch;
    let mut rgba = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let mut px = [0.0; 3];
            px.copy_from_slice(&image.data()[i * 3..i * 3 + 3]);
            if mask.data()[i] == 1.0 {
                px = px.map(|c| 0.55 * c + 0.45);
            }
            let on_edge = x % patch == 0 || y % patch == 0 || x % patch == patch - 1 || y % patch == patch - 1;
            if on_edge && labels.data()[(y / patch) * grid + x / patch] == 1.0 {
                px = [1.0; 3];
            }
            rgba.extend(px.map(|c| (c * 255.0).round() as u8));
            rgba.push(255);
        }
    }
    Ok(SceneView {
        size,
        expression: g.query.to_string(),
        positives: labels.data().iter().filter(|&&v| v == 1.0).count(),
        rgba,
    })
}

/// Fusion-encoder parameters and MACs per variant as CSV.
pub fn cost_table(image: usize, patch: usize, dim: usize, layers: usize, heads: usize, tokens: usize) -> Result<String> {
    let cfg = ModelConfig {
        image_h: image,
        image_w: image,
        patch_size: patch,
        vision_dim: dim,
        language_dim: dim,
        fusion_dim: dim,
        fusion_layers: layers,
        heads,
        max_tokens: tokens,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let mut csv = String::from("variant,params,macs\n");
    for v in FusionVariant::ALL {
        let p = profile(&cfg, v);
        csv.push_str(&format!("{v},{},{}\n", p.params, p.macs));
    }
    Ok(csv)
}

/// The learning rate at `points` evenly spaced steps from 0 to `total`.
pub fn schedule(base_lr: f64, warmup: usize, total: usize, power: f64, points: usize) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        base_lr,
        warmup_iters: warmup,
        total_iters: total,
        poly_power: power,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let last = points.max(2) - 1;
    Ok((0..=last).map(|i| lr_at(i * total / last, &cfg)).collect())
}

#[wasm_bindgen]
pub struct Scene {
    view: SceneView,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, patch: usize, tau: f64, which: usize) -> Result<Scene, JsError> {
        scene_view(seed, size, patch, tau, which).map(|view| Scene { view }).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.view.size
    }

    #[wasm_bindgen(getter)]
    pub fn expression(&self) -> String {
        self.view.expression.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn positives(&self) -> usize {
        self.view.positives
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.view.rgba.clone()
    }
}

#[wasm_bindgen(js_name = costTable)]
pub fn cost_table_js(image: usize, patch: usize, dim: usize, layers: usize, heads: usize, tokens: usize) -> Result<String, JsError> {
    cost_table(image, patch, dim, layers, heads, tokens).map_err(js)
}

#[wasm_bindgen(js_name = lrSchedule)]
pub fn schedule_js(base_lr: f64, warmup: usize, total: usize, power: f64, points: usize) -> Result<Vec<f64>, JsError> {
    schedule(base_lr, warmup, total, power, points).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_pixels_and_labels() {
        let v = scene_view(3, 64, 8, 0.8, 0).unwrap();
        assert_eq!(v.rgba.len(), 64 * 64 * 4);
        assert!(!v.expression.is_empty());
        let loose = scene_view(3, 64, 8, 0.1, 0).unwrap();
        assert!(loose.positives >= v.positives);
        assert_ne!(scene_view(3, 64, 8, 0.8, 1).unwrap().expression, v.expression);
        assert!(scene_view(3, 16, 8, 0.8, 0).is_err());
    }

    #[test]
    fn costs_order_variants() {
        let csv = cost_table(480, 16, 768, 4, 12, 20).unwrap();
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        assert_eq!(rows[0][0], "VME");
        assert_eq!(rows[0][1], rows[2][1]);
        assert!(rows[0][2].parse::<u64>().unwrap() > rows[2][2].parse::<u64>().unwrap());
        assert!(cost_table(64, 7, 64, 2, 4, 8).is_err());
    }

    #[test]
    fn schedule_shape() {
        let lr = schedule(1e-3, 10, 100, 0.9, 11).unwrap();
        assert_eq!(lr.len(), 11);
        assert_eq!(lr[0], 0.0);
        assert_eq!(lr[1], 1e-3);
        assert_eq!(lr[10], 0.0);
        assert!(lr.windows(2).skip(1).all(|w| w[1] <= w[0]));
        assert!(schedule(1e-3, 200, 100, 0.9, 5).is_err());
    }
}
