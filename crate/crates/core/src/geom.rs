//! Box geometry shared by every stage.

/// Axis-aligned box with continuous coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }
}

/// Integer pixel box, half-open: covers columns `x0..x1` and rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl PixelBox {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) as i64 * self.height().max(0) as i64
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    /// `(row, col)` lies inside the half-open box.
    pub fn contains(&self, row: i32, col: i32) -> bool {
        self.x0 <= col && col < self.x1 && self.y0 <= row && row < self.y1
    }

    pub fn intersects(&self, o: &PixelBox) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    pub fn union(&self, o: &PixelBox) -> PixelBox {
        PixelBox::new(self.x0.min(o.x0), self.y0.min(o.y0), self.x1.max(o.x1), self.y1.max(o.y1))
    }

    pub fn inflate(&self, d: i32) -> PixelBox {
        PixelBox::new(self.x0 - d, self.y0 - d, self.x1 + d, self.y1 + d)
    }

    /// Clamps into a `width × height` page, keeping at least one pixel.
    pub fn clamp_to(&self, width: i32, height: i32) -> PixelBox {
        let x0 = self.x0.clamp(0, width - 1);
        let y0 = self.y0.clamp(0, height - 1);
        let x1 = self.x1.clamp(x0 + 1, width);
        let y1 = self.y1.clamp(y0 + 1, height);
        PixelBox::new(x0, y0, x1, y1)
    }

    /// Rescales by `(sx, sy)` with round-half-up, keeping at least one pixel.
    pub fn rescale(&self, sx: f64, sy: f64) -> PixelBox {
        let r = |v: i32, s: f64| (v as f64 * s + 0.5).floor() as i32;
        let x0 = r(self.x0, sx);
        let y0 = r(self.y0, sy);
        PixelBox::new(x0, y0, r(self.x1, sx).max(x0 + 1), r(self.y1, sy).max(y0 + 1))
    }

    pub fn to_bbox(&self) -> BBox {
        BBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }
}
