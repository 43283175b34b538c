use super::{Detection, DetectorOutputs};

/// Boxes of sample `sample`: 3×3 local maxima of the heatmap (plateaus keep
/// every tied cell), the `max_k` highest scores in row-major order among
/// ties, then scores below `threshold` are dropped.
pub fn decode_detections(
    out: &DetectorOutputs,
    sample: usize,
    stride: usize,
    max_k: usize,
    threshold: f64,
) -> Vec<Detection> {
    let (_, _, h, w) = out.heatmap.dims4();
    let heat = out.heatmap.sample(sample);
    let hw = h * w;
    let mut peaks: Vec<(f64, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = heat[y * w + x];
            let mut is_max = true;
            'scan: for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    if heat[ny * w + nx] > v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                peaks.push((v, y * w + x));
            }
        }
    }
    // stable: equal scores stay in row-major order
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(max_k);

    let size = out.size.sample(sample);
    let offset = out.offset.sample(sample);
    let s = stride as f64;
    peaks
        .into_iter()
        .filter(|&(score, _)| score >= threshold)
        .map(|(score, cell)| {
            let (y, x) = ((cell / w) as f64, (cell % w) as f64);
            Detection {
                cx: (x + offset[cell]) * s,
                cy: (y + offset[hw + cell]) * s,
                w: size[cell].max(1e-6) * s,
                h: size[hw + cell].max(1e-6) * s,
                score: score.clamp(0.0, 1.0),
            }
        })
        .collect()
}
