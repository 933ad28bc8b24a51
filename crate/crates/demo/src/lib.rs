use nudba::geometry::{homography, warp_pixel, CameraIntrinsics, Frame};
use nudba::rendering::{composite, sdf_to_alpha};
use nudba::synth::{gt_depth, gt_flow, render_albedo, SceneConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn scene(preset: &str) -> Result<SceneConfig, JsValue> {
    SceneConfig::preset(preset).ok_or_else(|| js_err(format!("unknown preset {preset:?}")))
}

fn frame_pair(config: &SceneConfig, index: usize) -> Result<(Frame, Frame), JsValue> {
    let frames = config.frames();
    if index + 1 >= frames.len() {
        return Err(js_err(format!("frame {index} has no successor (frames: {})", frames.len())));
    }
    Ok((frames[index].clone(), frames[index + 1].clone()))
}

/// Alpha, weight and depth profile of one ray crossing a planar surface.
#[wasm_bindgen]
pub struct RayProfile {
    alphas: Vec<f64>,
    weights: Vec<f64>,
    depths: Vec<f64>,
    depth: f64,
    opacity: f64,
}

#[wasm_bindgen]
impl RayProfile {
    pub fn alphas(&self) -> Vec<f64> {
        self.alphas.clone()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.depths.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn depth(&self) -> f64 {
        self.depth
    }

    #[wasm_bindgen(getter)]
    pub fn opacity(&self) -> f64 {
        self.opacity
    }
}

/// Samples a ray of `length` at `samples` evenly spaced depths through a
/// surface at `surface_depth`, with the sdf falling at `slope` per unit.
#[wasm_bindgen]
pub fn ray_profile(
    surface_depth: f64,
    slope: f64,
    sharpness: f64,
    length: f64,
    samples: usize,
) -> Result<RayProfile, JsValue> {
    if samples < 2 || !(length > 0.0) || !(sharpness > 0.0) {
        return Err(js_err("need samples >= 2, length > 0 and sharpness > 0"));
    }
    let step = length / samples as f64;
    let depths: Vec<f64> = (0..samples).map(|i| (i as f64 + 0.5) * step).collect();
    let sdf: Vec<f64> = depths.iter().map(|t| slope * (surface_depth - t)).collect();
    let alphas = sdf_to_alpha(&sdf, &vec![step; samples], sharpness);
    let w = composite(&alphas);
    let depth = w.weights.iter().zip(&depths).map(|(w, t)| w * t).sum();
    Ok(RayProfile {
        alphas,
        weights: w.weights,
        depths,
        depth,
        opacity: w.opacity,
    })
}

/// RGBA view of a preset frame: `"albedo"` or `"depth"`.
#[wasm_bindgen]
pub fn scene_view(preset: &str, frame: usize, mode: &str) -> Result<Vec<u8>, JsValue> {
    let config = scene(preset)?;
    let frames = config.frames();
    let f = frames
        .get(frame)
        .ok_or_else(|| js_err(format!("frame {frame} out of range (frames: {})", frames.len())))?;
    let k = f.intrinsics;
    let mut rgba = vec![255u8; k.width * k.height * 4];
    match mode {
        "albedo" => {
            let im = render_albedo(&config.scene, f, 1.0, config.max_t());
            for (px, c) in rgba.chunks_mut(4).zip(im.rgb.chunks(3)) {
                for (o, v) in px.iter_mut().zip(c) {
                    *o = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        "depth" => {
            let d = gt_depth(&config.scene, f, None, config.max_t());
            let far = d.values.iter().zip(&d.mask).filter(|(_, m)| **m).map(|(v, _)| *v).fold(0.0f32, f32::max);
            for ((px, v), ok) in rgba.chunks_mut(4).zip(&d.values).zip(&d.mask) {
                let g = if *ok && far > 0.0 { (255.0 * (1.0 - v / far)).round() as u8 } else { 0 };
                px[..3].fill(g);
            }
        }
        other => return Err(js_err(format!("unknown mode {other:?}"))),
    }
    Ok(rgba)
}

/// `[width, height, frame count]` of a preset.
#[wasm_bindgen]
pub fn frame_size(preset: &str) -> Result<Vec<usize>, JsValue> {
    let frames = scene(preset)?.frames();
    let k = frames[0].intrinsics;
    Ok(vec![k.width, k.height, frames.len()])
}

/// Flow from `frame` to its successor on a grid with spacing `step`:
/// `[u, v, hu, hv, gu, gv]` per pixel, where `h` is the flow of the
/// fronto-parallel plane at `plane_depth` and `g` the exact flow (NaN
/// where the exact flow is undefined).
#[wasm_bindgen]
pub fn plane_flow(preset: &str, frame: usize, plane_depth: f64, step: usize) -> Result<Vec<f64>, JsValue> {
    let config = scene(preset)?;
    let (fj, fk) = frame_pair(&config, frame)?;
    let h = homography(&fj, &fk, plane_depth).map_err(js_err)?;
    let exact = gt_flow(&config.scene, &fj, &fk, None, config.max_t());
    let k = fj.intrinsics;
    let step = step.max(1);
    let mut out = Vec::new();
    for row in (step / 2..k.height).step_by(step) {
        for col in (step / 2..k.width).step_by(step) {
            let p = CameraIntrinsics::pixel_center(col, row);
            let Ok(q) = warp_pixel(&h, &p) else {
                continue;
            };
            let (gu, gv) = match exact.get(col, row) {
                Some(g) => (g[0] as f64, g[1] as f64),
                None => (f64::NAN, f64::NAN),
            };
            out.extend_from_slice(&[p.x, p.y, q.x - p.x, q.y - p.y, gu, gv]);
        }
    }
    Ok(out)
}
