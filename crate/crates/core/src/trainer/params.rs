//! Trained parameter file: `"FGRW" | version u32 | h u32 | h2 u32 | P | W1 | W2`,
//! little-endian, matrices as row-major `f32`.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::io::{expect_magic, expect_version, read_f32_matrix, read_u32, write_f32_matrix, write_u32};
use crate::scoring::HeadParams;
use crate::tensor::Matrix;

pub const PARAMS_MAGIC: [u8; 4] = *b"FGRW";
pub const PARAMS_VERSION: u32 = 1;

/// Serving-precision weights: encoder projection plus relevance head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub projection: Matrix,
    pub head: HeadParams,
}

impl ModelWeights {
    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.head.hidden_dim()
    }

    fn check(&self) -> Result<()> {
        let h = self.dim();
        if self.projection.cols() != h || self.head.dim() != h {
            return Err(Error::Shape {
                op: "model weights",
                left: self.projection.shape(),
                right: self.head.w1.shape(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, w: &mut impl Write) -> Result<()> {
        self.check()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&PARAMS_MAGIC);
        write_u32(&mut buf, PARAMS_VERSION).expect("vec write");
        write_u32(&mut buf, self.dim() as u32).expect("vec write");
        write_u32(&mut buf, self.hidden_dim() as u32).expect("vec write");
        write_f32_matrix(&mut buf, &self.projection).expect("vec write");
        write_f32_matrix(&mut buf, &self.head.w1).expect("vec write");
        write_f32_matrix(&mut buf, &self.head.w2).expect("vec write");
        w.write_all(&buf).map_err(|e| Error::io("<stream>", e))
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, PARAMS_MAGIC)?;
        expect_version(r, PARAMS_VERSION)?;
        let h = read_u32(r, "dim")? as usize;
        let h2 = read_u32(r, "hidden dim")? as usize;
        if h == 0 || h2 == 0 {
            return Err(FormatError::Corrupt(format!("zero dimension (h={h}, h2={h2})")).into());
        }
        let projection = read_f32_matrix(r, h, h, "projection")?;
        let w1 = read_f32_matrix(r, h, h2, "W1")?;
        let w2 = read_f32_matrix(r, h2, h, "W2")?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("<stream>", e))? != 0 {
            return Err(FormatError::Corrupt("trailing bytes after W2".into()).into());
        }
        Ok(Self {
            projection,
            head: HeadParams::new(w1, w2)?,
        })
    }
}

pub fn write_params(path: &Path, weights: &ModelWeights) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    weights.encode(&mut file)?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ModelWeights> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::decode(&mut BufReader::new(file))
}
