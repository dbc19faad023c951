//! Plain `f64` reference implementations used as test oracles. Written
//! directly from the definitions with explicit loops; nothing here calls into
//! the library under test.
#![allow(dead_code)]

#[derive(Debug, Clone)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Channel-major: `v[ch * h * w + pixel]`.
    pub v: Vec<f64>,
}

impl Feat {
    pub fn n(&self) -> usize {
        self.h * self.w
    }

    pub fn col(&self, p: usize) -> Vec<f64> {
        (0..self.c).map(|ch| self.v[ch * self.n() + p]).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two-way softmax, first entry.
pub fn softmax2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    ea / (ea + eb)
}

/// Average of the columns at `pixels`.
pub fn mean_cols(f: &Feat, pixels: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; f.c];
    for &p in pixels {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += f.v[ch * f.n() + p];
        }
    }
    out.iter().map(|v| v / pixels.len() as f64).collect()
}

/// Masked average pooling by a per-pixel loop. `None` for an empty mask.
pub fn map(f: &Feat, mask: &[u8]) -> Option<Vec<f64>> {
    let sel: Vec<usize> = (0..f.n()).filter(|&p| mask[p] == 1).collect();
    if sel.is_empty() {
        None
    } else {
        Some(mean_cols(f, &sel))
    }
}

pub fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| t * x + (1.0 - t) * y).collect()
}

#[derive(Clone, Debug)]
pub struct Proto {
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
    /// Optional per-pixel background replacing `bg` in predictions.
    pub field: Option<Vec<Vec<f64>>>,
}

impl Proto {
    pub fn global(&self) -> Proto {
        Proto {
            fg: self.fg.clone(),
            bg: self.bg.clone(),
            field: None,
        }
    }
}

pub fn support_proto(f: &Feat, mask: &[u8]) -> Proto {
    let fg = map(f, mask).expect("non-empty support mask");
    let comp: Vec<u8> = mask.iter().map(|&m| 1 - m).collect();
    let bg = map(f, &comp).unwrap_or_else(|| mean_cols(f, &(0..f.n()).collect::<Vec<_>>()));
    Proto { fg, bg, field: None }
}

pub fn predict(f: &Feat, p: &Proto, alpha: f64) -> Vec<f64> {
    (0..f.n())
        .map(|px| {
            let x = f.col(px);
            let bg = match &p.field {
                Some(field) => &field[px],
                None => &p.bg,
            };
            softmax2(alpha * cos(&x, &p.fg), alpha * cos(&x, bg))
        })
        .collect()
}

pub struct Ssp {
    pub fg_t: f64,
    pub bg_t: f64,
    pub beta: f64,
    pub passes: usize,
    pub alpha: f64,
    pub adaptive: bool,
    pub adaptive_scale: f64,
}

impl Default for Ssp {
    fn default() -> Self {
        Ssp {
            fg_t: 0.7,
            bg_t: 0.6,
            beta: 0.5,
            passes: 1,
            alpha: 10.0,
            adaptive: true,
            adaptive_scale: 2.0,
        }
    }
}

fn confident(probs: &[f64], t: f64) -> Vec<usize> {
    let sel: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > t).collect();
    if !sel.is_empty() {
        return sel;
    }
    let mut best = 0;
    for i in 0..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    vec![best]
}

pub fn ssp(f: &Feat, proto_in: &Proto, cfg: &Ssp) -> Proto {
    let mut cur = proto_in.global();
    let mut field = None;
    for _ in 0..=cfg.passes {
        let p_fg = predict(f, &cur, cfg.alpha);
        let p_bg: Vec<f64> = p_fg.iter().map(|p| 1.0 - p).collect();
        let fg_sel = confident(&p_fg, cfg.fg_t);
        let bg_sel = confident(&p_bg, cfg.bg_t);
        let self_fg = mean_cols(f, &fg_sel);
        let self_bg = mean_cols(f, &bg_sel);
        field = if cfg.adaptive {
            let region: Vec<Vec<f64>> = bg_sel.iter().map(|&j| f.col(j)).collect();
            Some(
                (0..f.n())
                    .map(|i| {
                        let x = f.col(i);
                        let logits: Vec<f64> = region.iter().map(|r| cfg.adaptive_scale * cos(&x, r)).collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        let mut local = vec![0.0; f.c];
                        for (wj, r) in e.iter().zip(&region) {
                            for ch in 0..f.c {
                                local[ch] += wj / s * r[ch];
                            }
                        }
                        lerp(&local, &cur.bg, cfg.beta)
                    })
                    .collect(),
            )
        } else {
            None
        };
        cur = Proto {
            fg: lerp(&self_fg, &cur.fg, cfg.beta),
            bg: lerp(&self_bg, &cur.bg, cfg.beta),
            field: None,
        };
    }
    Proto { field, ..cur }
}

pub const EPS: f64 = 1e-7;

/// Mean binary cross entropy of foreground probabilities against `target`.
pub fn bce(p_fg: &[f64], target: &[u8]) -> f64 {
    let total: f64 = p_fg
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let pf = p.clamp(EPS, 1.0 - EPS);
            let pb = (1.0 - p).clamp(EPS, 1.0 - EPS);
            if t == 1 {
                -pf.ln()
            } else {
                -pb.ln()
            }
        })
        .sum();
    total / p_fg.len() as f64
}

fn mean_vecs(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter().map(|x| x / vs.len() as f64).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Iterative adaptor loss. Masks are given at feature resolution. Returns
/// the weighted total and the terms in order: support base, then query and
/// support for every round.
pub fn ifa(fs: &[Feat], ms: &[Vec<u8>], fq: &Feat, mq: &[u8], rounds: usize, weights: [f64; 4], cfg: &Ssp) -> (f64, Vec<f64>) {
    let protos: Vec<Proto> = fs.iter().zip(ms).map(|(f, m)| support_proto(f, m)).collect();
    let mut cur = Proto {
        fg: mean_vecs(&protos.iter().map(|p| p.fg.clone()).collect::<Vec<_>>()),
        bg: mean_vecs(&protos.iter().map(|p| p.bg.clone()).collect::<Vec<_>>()),
        field: None,
    };
    let base: Vec<f64> = fs.iter().zip(ms).map(|(f, m)| bce(&predict(f, &cur, cfg.alpha), m)).collect();
    let mut terms = vec![mean(&base)];
    for _ in 0..rounds {
        let q = ssp(fq, &cur, cfg);
        terms.push(bce(&predict(fq, &q, cfg.alpha), mq));
        let back: Vec<Proto> = fs.iter().map(|f| ssp(f, &q.global(), cfg)).collect();
        let losses: Vec<f64> = fs.iter().zip(&back).zip(ms).map(|((f, p), m)| bce(&predict(f, p, cfg.alpha), m)).collect();
        terms.push(mean(&losses));
        cur = Proto {
            fg: mean_vecs(&back.iter().map(|p| p.fg.clone()).collect::<Vec<_>>()),
            bg: mean_vecs(&back.iter().map(|p| p.bg.clone()).collect::<Vec<_>>()),
            field: None,
        };
    }
    let [w_bs, w_bq, w_s, w_i] = weights;
    let mut total = w_bs * terms[0];
    for (j, pair) in terms[1..].chunks(2).enumerate() {
        let (wq, ws) = if j == 0 { (w_bq, w_s) } else { (w_i, w_i) };
        total += wq * pair[0] + ws * pair[1];
    }
    (total, terms)
}

/// Direct 2-D convolution, zero padding, `weight[o][i][ky][kx]`.
pub fn conv2d(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (x * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((o * cin + i) * k + ky) * k + kx] * input[(i * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, oh, ow)
}
