pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the forward output was clamped. `y` is the post-ReLU value.
pub fn relu_backward_inplace(y: &[f64], dy: &mut [f64]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_inplace(x: &mut [f64]) {
    for v in x {
        *v = sigmoid(*v);
    }
}

/// `y` is the sigmoid output.
pub fn sigmoid_backward_inplace(y: &[f64], dy: &mut [f64]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        *g *= o * (1.0 - o);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
