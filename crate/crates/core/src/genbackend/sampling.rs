use rand::Rng;

/// Smallest prefix of tokens, ordered by (probability desc, index asc),
/// whose cumulative mass reaches `top_p`. Never empty for a nonempty input.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = 0;
    for &t in &order {
        keep += 1;
        cum += probs[t];
        if cum >= top_p {
            break;
        }
    }
    order.truncate(keep.max(1));
    order
}

/// Nucleus truncation, then temperature-scaled renormalized sampling inside
/// the nucleus. Temperatures near zero reduce to argmax.
pub fn sample_token<R: Rng + ?Sized>(
    probs: &[f64],
    top_p: f64,
    temperature: f64,
    rng: &mut R,
) -> usize {
    let kept = nucleus(probs, top_p);
    let top = probs[kept[0]].ln();
    let weights: Vec<f64> = kept
        .iter()
        .map(|&t| ((probs[t].ln() - top) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&t, &w) in kept.iter().zip(&weights) {
        if u < w {
            return t;
        }
        u -= w;
    }
    // rounding fallback: last token with positive weight
    kept.iter()
        .zip(&weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .map(|(&t, _)| t)
        .unwrap_or(kept[0])
}
