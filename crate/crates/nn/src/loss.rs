use crate::scalar::Scalar;

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy on a logit with the positive term scaled by
/// `pos_weight`:
///
/// `-[w·y·ln σ(z) + (1-y)·ln(1-σ(z))] = w·y·softplus(-z) + (1-y)·softplus(z)`
pub fn weighted_bce<T: Scalar>(logit: T, label: T, pos_weight: T) -> T {
    pos_weight * label * softplus(-logit) + (T::one() - label) * softplus(logit)
}

/// d/dz of [`weighted_bce`].
pub fn weighted_bce_grad<T: Scalar>(logit: T, label: T, pos_weight: T) -> T {
    let s = sigmoid(logit);
    pos_weight * label * (s - T::one()) + (T::one() - label) * s
}

/// `#negative / #positive`, the usual automatic positive weight.
pub fn auto_pos_weight(labels: impl IntoIterator<Item = bool>) -> Option<f64> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for l in labels {
        if l {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    (pos > 0).then(|| neg as f64 / pos as f64)
}
