//! Plain-text model container. Every matrix is stored in shortest
//! round-trip decimal form, so save followed by load is bit-exact.
//!
//! ```text
//! stable-koopman checkpoint v1
//! activation tanh
//! encoder 2,50,50,50,20
//! decoder 20,50,50,50,2
//! meta seed=0
//! preprocess.offset 0.1,0.2
//! preprocess.scale 1.0,1.0
//! preprocess.dt 0.1
//! matrix encoder.0.weight 50 2
//! <rows as comma separated values>
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Activation;
use crate::data::Preprocessing;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{KoopmanModel, Layer, Mlp};

const MAGIC: &str = "stable-koopman checkpoint v1";

/// A trained model together with the preprocessing it was trained under and
/// free-form `key=value` metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: KoopmanModel,
    pub preprocessing: Option<Preprocessing>,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: KoopmanModel) -> Self {
        Self {
            model,
            preprocessing: None,
            meta: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "activation {}", m.encoder.activation().name());
        let _ = writeln!(s, "encoder {}", join_usize(&m.encoder.sizes()));
        let _ = writeln!(s, "decoder {}", join_usize(&m.decoder.sizes()));
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k}={v}");
        }
        if let Some(p) = &self.preprocessing {
            let _ = writeln!(s, "preprocess.offset {}", join_f64(&p.offset));
            let _ = writeln!(s, "preprocess.scale {}", join_f64(&p.scale));
            if let Some(dt) = p.dt {
                let _ = writeln!(s, "preprocess.dt {dt:?}");
            }
        }
        for (name, mlp) in [("encoder", &m.encoder), ("decoder", &m.decoder)] {
            for (k, l) in mlp.layers().iter().enumerate() {
                write_matrix(&mut s, &format!("{name}.{k}.weight"), &l.weight);
                write_matrix(&mut s, &format!("{name}.{k}.bias"), &l.bias);
            }
        }
        write_matrix(&mut s, "K", &m.k);
        write_matrix(&mut s, "S", &m.s);
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        match lines.next() {
            Some((_, MAGIC)) => {}
            Some((n, other)) => return Err(err(n, format!("expected `{MAGIC}`, found `{other}`"))),
            None => return Err(err(1, "empty checkpoint".into())),
        }

        let mut activation = None;
        let mut enc_sizes = None;
        let mut dec_sizes = None;
        let mut meta = Vec::new();
        let (mut offset, mut scale, mut dt) = (None, None, None);
        let mut matrices: Vec<(String, DenseMatrix)> = Vec::new();
        let mut finished = false;

        while let Some((n, line)) = lines.next() {
            if line.is_empty() {
                continue;
            }
            if line == "end" {
                finished = true;
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "activation" => {
                    activation = Some(
                        rest.parse::<Activation>()
                            .map_err(|e| err(n, e.to_string()))?,
                    )
                }
                "encoder" => {
                    enc_sizes =
                        Some(parse_usizes(rest).ok_or_else(|| err(n, "bad layer sizes".into()))?)
                }
                "decoder" => {
                    dec_sizes =
                        Some(parse_usizes(rest).ok_or_else(|| err(n, "bad layer sizes".into()))?)
                }
                "meta" => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| err(n, "meta entries are key=value".into()))?;
                    meta.push((k.to_string(), v.to_string()));
                }
                "preprocess.offset" => {
                    offset = Some(parse_f64s(rest).ok_or_else(|| err(n, "bad offset".into()))?)
                }
                "preprocess.scale" => {
                    scale = Some(parse_f64s(rest).ok_or_else(|| err(n, "bad scale".into()))?)
                }
                "preprocess.dt" => {
                    dt = Some(rest.parse::<f64>().map_err(|e| err(n, e.to_string()))?)
                }
                "matrix" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    let [name, r, c] = parts[..] else {
                        return Err(err(
                            n,
                            "matrix header is `matrix <name> <rows> <cols>`".into(),
                        ));
                    };
                    let r: usize = r
                        .parse()
                        .map_err(|_| err(n, format!("bad row count `{r}`")))?;
                    let c: usize = c
                        .parse()
                        .map_err(|_| err(n, format!("bad column count `{c}`")))?;
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        let (m, row) = lines
                            .next()
                            .ok_or_else(|| err(n, format!("matrix {name} truncated")))?;
                        let vals = parse_f64s(row)
                            .ok_or_else(|| err(m, "bad number in matrix row".into()))?;
                        if vals.len() != c {
                            return Err(err(
                                m,
                                format!("expected {c} values, found {}", vals.len()),
                            ));
                        }
                        data.extend(vals);
                    }
                    let mat = DenseMatrix::new(r, c, data).map_err(|e| err(n, e.to_string()))?;
                    matrices.push((name.to_string(), mat));
                }
                other => return Err(err(n, format!("unknown entry `{other}`"))),
            }
        }
        if !finished {
            return Err(err(text.lines().count(), "missing `end`".into()));
        }

        let missing = |what: &str| err(0, format!("checkpoint has no {what}"));
        let activation = activation.ok_or_else(|| missing("activation"))?;
        let enc_sizes = enc_sizes.ok_or_else(|| missing("encoder sizes"))?;
        let dec_sizes = dec_sizes.ok_or_else(|| missing("decoder sizes"))?;
        let mut take = |name: &str| -> Result<DenseMatrix> {
            let pos = matrices
                .iter()
                .position(|(k, _)| k == name)
                .ok_or_else(|| missing(&format!("matrix {name}")))?;
            Ok(matrices.swap_remove(pos).1)
        };
        let mut build = |prefix: &str, sizes: &[usize]| -> Result<Mlp> {
            if sizes.len() < 2 {
                return Err(missing(&format!("{prefix} layers")));
            }
            let layers = (0..sizes.len() - 1)
                .map(|k| {
                    Ok(Layer {
                        weight: take(&format!("{prefix}.{k}.weight"))?,
                        bias: take(&format!("{prefix}.{k}.bias"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mlp = Mlp::from_layers(layers, activation)?;
            if mlp.sizes() != sizes {
                return Err(Error::dim(
                    "checkpoint",
                    format!(
                        "{prefix} matrices give sizes {:?}, header says {sizes:?}",
                        mlp.sizes()
                    ),
                ));
            }
            Ok(mlp)
        };
        let encoder = build("encoder", &enc_sizes)?;
        let decoder = build("decoder", &dec_sizes)?;
        let k = take("K")?;
        let s = take("S")?;
        if let Some((name, _)) = matrices.first() {
            return Err(err(0, format!("unexpected matrix {name}")));
        }
        let model = KoopmanModel::from_parts(encoder, decoder, k, s)?;

        let preprocessing = match (offset, scale) {
            (Some(offset), Some(scale)) => {
                let n = model.state_dim();
                if offset.len() != n || scale.len() != n {
                    return Err(Error::dim(
                        "checkpoint",
                        format!("preprocessing for dimension {n}"),
                    ));
                }
                Some(Preprocessing { dt, offset, scale })
            }
            (None, None) => None,
            _ => return Err(missing("complete preprocessing (offset and scale)")),
        };
        Ok(Self {
            model,
            preprocessing,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn write_matrix(s: &mut String, name: &str, m: &DenseMatrix) {
    let _ = writeln!(s, "matrix {name} {} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let _ = writeln!(s, "{}", join_f64(m.row(i)));
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usizes(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn parse_f64s(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse().ok()).collect()
}
