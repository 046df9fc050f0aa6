//! Grid dimensions, axes and dense real-valued 3D arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts per axis, `[nx, ny, nz]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.0[axis.index()]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.0[0] * (j + self.0[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.0[0];
        let rest = idx / self.0[0];
        [i, rest % self.0[1], rest / self.0[1]]
    }

    /// Linear-index stride of one step along `axis`.
    pub fn stride(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => 1,
            Axis::Y => self.0[0],
            Axis::Z => self.0[0] * self.0[1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("dims {:?} must be positive", self.0)));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Parses `"NXxNYxNZ"`, e.g. `40x40x1`.
impl std::str::FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidParameter(format!(
                "dims {s:?} are not NXxNYxNZ"
            )));
        }
        let mut d = [0usize; 3];
        for (slot, p) in d.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad extent {p:?} in {s:?}")))?;
        }
        let dims = Dims(d);
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidParameter(format!("unknown axis {other:?}"))),
        }
    }
}

/// Dense real-valued 3D array, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    dims: Dims,
    data: Vec<f64>,
}

impl Field3 {
    pub fn zeros(dims: Dims) -> Self {
        Field3 {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Field3 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} values for dims {dims}",
                data.len()
            )));
        }
        Ok(Field3 { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.dims.index(i, j, k);
        self.data[idx] = v;
    }
}
