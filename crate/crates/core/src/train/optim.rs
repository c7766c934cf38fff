use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Learning rate multiplied by 0.2 at one third and again at two thirds of training.
pub fn lr_at(iteration: usize, total_iterations: usize, base_lr: f32) -> f32 {
    if 3 * iteration < total_iterations {
        base_lr
    } else if 3 * iteration < 2 * total_iterations {
        base_lr * 0.2
    } else {
        base_lr * 0.04
    }
}

/// First and second moments for every trainable parameter, in store order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One Adam update of a flat parameter slice; `step` is 1-based. Weight decay
/// is added to the gradient before the moment updates.
pub fn adam_update(theta: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], step: u64, lr: f32, weight_decay: f32) {
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i] + weight_decay * theta[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Updates every trainable parameter from its accumulated gradient (zero if absent).
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f32, weight_decay: f32) {
    state.step += 1;
    let trainable = store.iter_mut().filter(|p| p.trainable);
    for ((p, m), v) in trainable.zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let zeros;
        let grad = match &p.grad {
            Some(g) => g.data(),
            None => {
                zeros = vec![0f32; p.value.numel()];
                &zeros
            }
        };
        adam_update(
            p.value.data_mut(),
            grad,
            m.data_mut(),
            v.data_mut(),
            state.step,
            lr,
            weight_decay,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0, 300, 1e-5), 1e-5);
        assert_eq!(lr_at(99, 300, 1e-5), 1e-5);
        assert_eq!(lr_at(100, 300, 1e-5), 1e-5 * 0.2);
        assert!((lr_at(150, 300, 1e-5) - 2e-6).abs() < 1e-12);
        assert_eq!(lr_at(199, 300, 1e-5), 1e-5 * 0.2);
        assert!((lr_at(250, 300, 1e-5) - 4e-7).abs() < 1e-12);
    }

    #[test]
    fn schedule_has_exactly_two_steps() {
        let lrs: Vec<f32> = (0..90).map(|i| lr_at(i, 90, 1.0)).collect();
        let drops: Vec<usize> = (1..90).filter(|&i| lrs[i] != lrs[i - 1]).collect();
        assert_eq!(drops, vec![30, 60]);
        assert!((lrs[30] / lrs[29] - 0.2).abs() < 1e-6);
        assert!((lrs[60] / lrs[59] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut theta = vec![0.5, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0);
        assert_eq!(theta, vec![0.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g| + ε).
        let mut theta = vec![1.0f32];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, 0.0);
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-6);
        assert!(v[0] >= 0.0);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut theta = vec![2.0f32];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_update(&mut theta, &[0.0], &mut m, &mut v, 1, 0.1, 0.5);
        assert!((m[0] - 0.1 * 1.0).abs() < 1e-7);
        assert!(theta[0] < 2.0);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let run = || {
            let mut theta = vec![0.3f32, -0.7, 1.1];
            let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
            for step in 1..=5 {
                adam_update(&mut theta, &[0.2, -0.4, 0.9], &mut m, &mut v, step, 0.01, 0.1);
            }
            theta.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
