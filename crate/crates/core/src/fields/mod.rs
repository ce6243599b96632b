//! Field and image containers.
//!
//! Both containers are cell-centered: sample `i` along an axis of length `n`
//! sits at `(i + 0.5) / n` in the unit cube. Scalar data is stored with `x`
//! fastest, images row by row from the top.

pub mod io;
pub mod metrics;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl ScalarField {
    /// Values are clamped to `[0,1]`.
    pub fn new(dims: Vec<usize>, mut data: Vec<f32>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("2 or 3 non-zero dims", format!("{dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{n} values for dims {dims:?}"), data.len()));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    /// Fills every cell center from `f(x, y, z)` (`z = 0.5` for 2-D fields).
    pub fn from_fn(dims: Vec<usize>, f: impl Fn([f32; 3]) -> f32) -> Result<Self> {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let nz = dims.get(2).copied().unwrap_or(1);
        for k in 0..nz {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let z = if dims.len() == 3 { (k as f32 + 0.5) / nz as f32 } else { 0.5 };
                    data.push(f([
                        (i as f32 + 0.5) / dims[0] as f32,
                        (j as f32 + 0.5) / dims[1] as f32,
                        z,
                    ]));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Cell-centered (bi/tri)linear interpolation, clamped at the border.
    pub fn sample(&self, p: [f32; 3]) -> f32 {
        let axis = |v: f32, n: usize| -> (usize, usize, f32) {
            let u = (v.clamp(0.0, 1.0) * n as f32 - 0.5).clamp(0.0, (n - 1) as f32);
            let i0 = (u.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, u - i0 as f32)
        };
        let (x0, x1, fx) = axis(p[0], self.dims[0]);
        let (y0, y1, fy) = axis(p[1], self.dims[1]);
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let plane = |k: usize| {
            let a = lerp(self.get(x0, y0, k), self.get(x1, y0, k), fx);
            let b = lerp(self.get(x0, y1, k), self.get(x1, y1, k), fx);
            lerp(a, b, fy)
        };
        if self.dims.len() == 2 {
            return plane(0);
        }
        let (z0, z1, fz) = axis(p[2], self.dims[2]);
        lerp(plane(z0), plane(z1), fz)
    }

    /// One z-slice as a `(nx, ny)` row-major plane.
    pub fn slice_z(&self, k: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.data[k * n..(k + 1) * n]
    }

    pub fn depth(&self) -> usize {
        self.dims.get(2).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("non-empty image", format!("{width}x{height}")));
        }
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!("{} values for {width}x{height} RGB", 3 * width * height), data.len()));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { width, height, data })
    }

    pub fn black(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; 3 * width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0 + 0.5).clamp(0.0, 255.0) as u8).collect()
    }
}

/// Anything a scene parameter maps to: a scalar volume/slice or an image.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Scalar(ScalarField),
    Rgb(ImageRgb),
}

/// Shape descriptor shared by fields that can be compared or blended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldShape {
    pub kind: FieldKind,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Scalar,
    Rgb,
}

impl FieldShape {
    pub fn channels(&self) -> usize {
        match self.kind {
            FieldKind::Scalar => 1,
            FieldKind::Rgb => 3,
        }
    }

    pub fn coord_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_points(&self) -> usize {
        self.dims.iter().product()
    }

    /// Cell-center coordinate of point `idx`, first axis fastest.
    pub fn point_coord(&self, idx: usize, out: &mut [f32]) {
        let mut rem = idx;
        for (axis, &n) in self.dims.iter().enumerate() {
            out[axis] = ((rem % n) as f32 + 0.5) / n as f32;
            rem /= n;
        }
    }

    /// All point coordinates, `num_points × coord_dim`.
    pub fn lattice(&self) -> Vec<f32> {
        let d = self.coord_dim();
        let mut out = vec![0.0; self.num_points() * d];
        for (i, c) in out.chunks_exact_mut(d).enumerate() {
            self.point_coord(i, c);
        }
        out
    }

    pub fn field_from_values(&self, values: Vec<f32>) -> Result<Field> {
        match self.kind {
            FieldKind::Scalar => Ok(Field::Scalar(ScalarField::new(self.dims.clone(), values)?)),
            FieldKind::Rgb => {
                if self.dims.len() != 2 {
                    return Err(Error::shape("2-D image dims", format!("{:?}", self.dims)));
                }
                Ok(Field::Rgb(ImageRgb::new(self.dims[0], self.dims[1], values)?))
            }
        }
    }
}

impl Field {
    pub fn shape(&self) -> FieldShape {
        match self {
            Field::Scalar(f) => FieldShape {
                kind: FieldKind::Scalar,
                dims: f.dims.clone(),
            },
            Field::Rgb(img) => FieldShape {
                kind: FieldKind::Rgb,
                dims: vec![img.width, img.height],
            },
        }
    }

    /// Flat values, `num_points × channels`, in point order.
    pub fn values(&self) -> &[f32] {
        match self {
            Field::Scalar(f) => &f.data,
            Field::Rgb(img) => &img.data,
        }
    }

    pub fn as_scalar(&self) -> Option<&ScalarField> {
        match self {
            Field::Scalar(f) => Some(f),
            Field::Rgb(_) => None,
        }
    }

    pub fn as_rgb(&self) -> Option<&ImageRgb> {
        match self {
            Field::Rgb(img) => Some(img),
            Field::Scalar(_) => None,
        }
    }
}
