//! Plain-text model checkpoints.
//!
//! One `key value` pair per line. Floats are written in Rust's shortest
//! round-trip notation, so a write followed by a read reproduces every
//! parameter bit for bit.
//!
//! ```text
//! knowgrade-checkpoint 1
//! kind cnak
//! dim 8
//! ...
//! course MATH1271
//! student 0001
//! param provided 0.012 -0.03 ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::models::{Block, Layout, Model, ModelConfig, ModelKind};
use crate::training::TrainConfig;

pub const MAGIC: &str = "knowgrade-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Maps course and student ids to parameter rows.
    pub vocab: Vocabulary,
    pub train: Option<TrainConfig>,
}

fn blocks(layout: &Layout) -> [(&'static str, Block); 13] {
    [
        ("provided", layout.provided),
        ("required", layout.required),
        ("course_bias", layout.course_bias),
        ("prior_w", layout.prior_net.w),
        ("prior_b", layout.prior_net.b),
        ("prior_h", layout.prior_net.h),
        ("concurrent_w", layout.concurrent_net.w),
        ("concurrent_b", layout.concurrent_net.b),
        ("concurrent_h", layout.concurrent_net.h),
        ("global_bias", layout.global_bias),
        ("student_bias", layout.student_bias),
        ("student_vec", layout.student_vec),
        ("course_vec", layout.course_vec),
    ]
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_text(&self) -> Result<String> {
        let m = &self.model;
        let c = &m.config;
        if m.n_courses() != self.vocab.courses().len()
            || m.n_students() != self.vocab.students().len()
        {
            return Err(err("vocabulary size does not match the model"));
        }
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "{MAGIC} {VERSION}");
        let _ = writeln!(w, "kind {}", c.kind);
        let _ = writeln!(w, "dim {}", c.dim);
        let _ = writeln!(w, "attn_dim {}", c.attn_dim);
        let _ = writeln!(w, "decay {}", c.decay);
        let _ = writeln!(w, "gamma {}", c.gamma);
        let _ = writeln!(w, "grade_weighted_attention {}", c.grade_weighted_attention);
        let _ = writeln!(w, "seed {}", c.seed);
        if let Some(t) = &self.train {
            let _ = writeln!(w, "train.l2 {}", t.l2);
            let _ = writeln!(w, "train.lr {}", t.lr);
            let _ = writeln!(w, "train.batch_size {}", t.batch_size);
            let _ = writeln!(w, "train.max_epochs {}", t.max_epochs);
            let _ = writeln!(w, "train.patience {}", t.patience);
            let _ = writeln!(w, "train.seed {}", t.seed);
            let _ = writeln!(w, "train.epsilon {}", t.epsilon);
            let _ = writeln!(w, "train.regularize_biases {}", t.regularize_biases);
        }
        let _ = writeln!(w, "n_courses {}", m.n_courses());
        let _ = writeln!(w, "n_students {}", m.n_students());
        for id in self.vocab.courses() {
            check_id(id)?;
            let _ = writeln!(w, "course {id}");
        }
        for id in self.vocab.students() {
            check_id(id)?;
            let _ = writeln!(w, "student {id}");
        }
        for (name, block) in blocks(&m.layout) {
            if block.len == 0 {
                continue;
            }
            let _ = write!(w, "param {name}");
            for v in &m.params[block.range()] {
                let _ = write!(w, " {v:?}");
            }
            let _ = writeln!(w);
        }
        let _ = writeln!(w, "end");
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty checkpoint"))?;
        match header.split_once(' ') {
            Some((MAGIC, v)) if v.trim().parse::<u32>().ok() == Some(VERSION) => {}
            Some((MAGIC, v)) => return Err(err(format!("unsupported version {v}"))),
            _ => return Err(err("not a checkpoint file")),
        }

        let mut scalars: Vec<(String, String)> = Vec::new();
        let mut courses = Vec::new();
        let mut students = Vec::new();
        let mut params: Vec<(String, Vec<f64>)> = Vec::new();
        let mut ended = false;
        for line in lines {
            if line == "end" {
                ended = true;
                break;
            }
            let (key, value) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "course" => courses.push(value.to_string()),
                "student" => students.push(value.to_string()),
                "param" => {
                    let mut parts = value.split(' ');
                    let name = parts.next().unwrap_or_default().to_string();
                    let values = parts
                        .map(|v| {
                            v.parse::<f64>()
                                .map_err(|e| err(format!("param {name}: '{v}': {e}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    params.push((name, values));
                }
                _ => scalars.push((key.to_string(), value.to_string())),
            }
        }
        if !ended {
            return Err(err("truncated checkpoint (missing 'end')"));
        }

        let get = |key: &str| -> Result<&str> {
            scalars
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| err(format!("missing '{key}'")))
        };
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| err(format!("{key}: '{v}': {e}")))
        }

        let kind: ModelKind = get("kind")?
            .parse()
            .map_err(|e: Error| err(e.to_string()))?;
        let config = ModelConfig {
            kind,
            dim: parse("dim", get("dim")?)?,
            attn_dim: parse("attn_dim", get("attn_dim")?)?,
            decay: parse("decay", get("decay")?)?,
            gamma: parse("gamma", get("gamma")?)?,
            grade_weighted_attention: parse(
                "grade_weighted_attention",
                get("grade_weighted_attention")?,
            )?,
            seed: parse("seed", get("seed")?)?,
        };
        let train = if scalars.iter().any(|(k, _)| k.starts_with("train.")) {
            Some(TrainConfig {
                l2: parse("train.l2", get("train.l2")?)?,
                lr: parse("train.lr", get("train.lr")?)?,
                batch_size: parse("train.batch_size", get("train.batch_size")?)?,
                max_epochs: parse("train.max_epochs", get("train.max_epochs")?)?,
                patience: parse("train.patience", get("train.patience")?)?,
                seed: parse("train.seed", get("train.seed")?)?,
                epsilon: parse("train.epsilon", get("train.epsilon")?)?,
                regularize_biases: parse(
                    "train.regularize_biases",
                    get("train.regularize_biases")?,
                )?,
            })
        } else {
            None
        };
        let n_courses: usize = parse("n_courses", get("n_courses")?)?;
        let n_students: usize = parse("n_students", get("n_students")?)?;
        if courses.len() != n_courses || students.len() != n_students {
            return Err(err(format!(
                "expected {n_courses} courses and {n_students} students, found {} and {}",
                courses.len(),
                students.len()
            )));
        }
        let vocab = Vocabulary::new(courses.clone(), students.clone());
        if vocab.courses() != courses.as_slice() || vocab.students() != students.as_slice() {
            return Err(err("course and student ids must be sorted and unique"));
        }

        let mut model =
            Model::zeros(config, n_courses, n_students).map_err(|e| err(e.to_string()))?;
        let mut seen = Vec::new();
        for (name, values) in params {
            let (_, block) = blocks(&model.layout)
                .into_iter()
                .find(|(n, b)| *n == name && b.len > 0)
                .ok_or_else(|| err(format!("unexpected parameter block '{name}'")))?;
            if values.len() != block.len {
                return Err(err(format!(
                    "block '{name}' has {} values, expected {}",
                    values.len(),
                    block.len
                )));
            }
            model.params[block.range()].copy_from_slice(&values);
            seen.push(name);
        }
        for (name, block) in blocks(&model.layout) {
            if block.len > 0 && !seen.iter().any(|s| s == name) {
                return Err(err(format!("missing parameter block '{name}'")));
            }
        }
        Ok(Checkpoint {
            model,
            vocab,
            train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_text(&text)
    }
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\n', '\r']) {
        return Err(err(format!("id {id:?} cannot be stored")));
    }
    Ok(())
}
