//! Registry of unary ops with custom pseudo-derivatives.
//!
//! The forward map is computed exactly; the backward rule multiplies the
//! upstream gradient by `pseudo(input)` instead of the true derivative.
//! Used for the rectified tanh (whose derivative is taken as 0 on the
//! rectified branch) and the Heaviside step (pseudo-derivative 1).

use std::sync::{Mutex, OnceLock};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CustomOpId(pub(crate) usize);

pub(crate) struct CustomOp {
    pub name: &'static str,
    pub forward: fn(f32) -> f32,
    pub pseudo: fn(f32) -> f32,
}

fn registry() -> &'static Mutex<Vec<CustomOp>> {
    static REG: OnceLock<Mutex<Vec<CustomOp>>> = OnceLock::new();
    REG.get_or_init(|| {
        Mutex::new(vec![
            CustomOp { name: "rectified_tanh", forward: rectified_tanh, pseudo: rectified_tanh_pseudo },
            CustomOp { name: "heaviside", forward: heaviside, pseudo: |_| 1.0 },
        ])
    })
}

/// Registers a new custom op. Fails when the name is already taken.
pub fn register_custom(
    name: &'static str,
    forward: fn(f32) -> f32,
    pseudo: fn(f32) -> f32,
) -> Result<CustomOpId, String> {
    let mut reg = registry().lock().unwrap();
    if reg.iter().any(|op| op.name == name) {
        return Err(format!("custom op '{name}' is already registered"));
    }
    reg.push(CustomOp { name, forward, pseudo });
    Ok(CustomOpId(reg.len() - 1))
}

/// Looks up a registered op by name.
pub fn custom_op_id(name: &str) -> Option<CustomOpId> {
    let reg = registry().lock().unwrap();
    reg.iter().position(|op| op.name == name).map(CustomOpId)
}

pub(crate) fn apply_forward(id: CustomOpId, x: &[f32], out: &mut [f32]) {
    let reg = registry().lock().unwrap();
    let f = reg[id.0].forward;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = f(v);
    }
}

pub(crate) fn apply_pseudo(id: CustomOpId, x: &[f32], upstream: &[f32], grad: &mut [f32]) {
    let reg = registry().lock().unwrap();
    let f = reg[id.0].pseudo;
    for ((g, &v), &u) in grad.iter_mut().zip(x).zip(upstream) {
        *g += f(v) * u;
    }
}

pub(crate) fn op_name(id: CustomOpId) -> &'static str {
    registry().lock().unwrap()[id.0].name
}

/// Rectified hyperbolic tangent: max(0, tanh(x)), range [0, 1).
pub fn rectified_tanh(x: f32) -> f32 {
    x.tanh().max(0.0)
}

/// Pseudo-derivative of the rectified tanh: 0 for x <= 0, else 1 - tanh(x)^2.
pub fn rectified_tanh_pseudo(x: f32) -> f32 {
    if x <= 0.0 {
        0.0
    } else {
        let t = x.tanh();
        1.0 - t * t
    }
}

/// Heaviside step with the convention step(0) = 0.
pub fn heaviside(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_values() {
        assert!((rectified_tanh(1.0) - 0.7615942).abs() < 1e-6);
        assert!((rectified_tanh_pseudo(1.0) - 0.41997433).abs() < 1e-6);
        assert_eq!(rectified_tanh(-2.0), 0.0);
        assert_eq!(rectified_tanh_pseudo(-2.0), 0.0);
        assert_eq!(heaviside(-3.0), 0.0);
        assert_eq!(heaviside(0.0), 0.0);
        assert_eq!(heaviside(0.5), 1.0);
    }

    #[test]
    fn duplicate_registration_rejected() {
        assert!(register_custom("rectified_tanh", |x| x, |_| 1.0).is_err());
        // New names succeed and become findable.
        let id = register_custom("unit_test_identity", |x| x, |_| 1.0).unwrap();
        assert_eq!(custom_op_id("unit_test_identity"), Some(id));
    }
}
