use wasm_bindgen::prelude::*;

use crate::World;

fn js(e: dynmat::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(World);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, spread: f64) -> Result<Demo, JsError> {
        World::new(seed.into(), spread).map(Demo).map_err(js)
    }

    /// Training points as `[x, y, label, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.0
            .train
            .examples
            .iter()
            .flat_map(|e| [e.vector[0], e.vector[1], e.label as f64])
            .collect()
    }

    /// Stored neurons at `theta` as `[x, y, label, ...]`.
    pub fn neurons(&self, theta: f64) -> Result<Vec<f64>, JsError> {
        let layer = self.0.layer(theta).map_err(js)?;
        Ok(layer
            .neurons()
            .iter()
            .flat_map(|n| [n.weights[0], n.weights[1], n.label as f64])
            .collect())
    }

    #[wasm_bindgen(js_name = mlSizes)]
    pub fn ml_sizes(&self, thetas: &[f64]) -> Result<Vec<u32>, JsError> {
        Ok(self
            .0
            .ml_sizes(thetas)
            .map_err(js)?
            .into_iter()
            .map(|n| n as u32)
            .collect())
    }

    pub fn ring(&self, theta: f64, samples: u32) -> Result<Vec<u32>, JsError> {
        self.0.ring(theta, samples as usize).map_err(js)
    }

    /// `[err_old, err_new, ...]`, one pair per insertion.
    pub fn exposure(&self, theta: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        let curve = self.0.exposure(theta, seed.into()).map_err(js)?;
        Ok(curve.iter().flat_map(|p| [p.err_old, p.err_new]).collect())
    }
}
