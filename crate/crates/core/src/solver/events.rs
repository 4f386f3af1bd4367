use super::{DenseSegment, SolverError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `g` goes from negative to non-negative.
    Rising,
    /// `g` goes from positive to non-positive.
    Falling,
    Either,
}

impl Direction {
    /// Whether a step from `g0` to `g1` counts as a crossing. A zero at the
    /// start of a step belongs to the previous step and is not counted again.
    pub fn crossed(self, g0: f64, g1: f64) -> bool {
        let rising = g0 < 0.0 && g1 >= 0.0;
        let falling = g0 > 0.0 && g1 <= 0.0;
        match self {
            Direction::Rising => rising,
            Direction::Falling => falling,
            Direction::Either => rising || falling,
        }
    }
}

pub type EventFn<'a> = Box<dyn Fn(f64, &[f64]) -> f64 + 'a>;

pub struct EventSpec<'a> {
    pub name: &'static str,
    pub function: EventFn<'a>,
    pub direction: Direction,
    pub terminal: bool,
}

impl<'a> EventSpec<'a> {
    pub fn new(
        name: &'static str,
        direction: Direction,
        terminal: bool,
        function: impl Fn(f64, &[f64]) -> f64 + 'a,
    ) -> Self {
        Self {
            name,
            function: Box::new(function),
            direction,
            terminal,
        }
    }
}

impl std::fmt::Debug for EventSpec<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventSpec")
            .field("name", &self.name)
            .field("direction", &self.direction)
            .field("terminal", &self.terminal)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub index: usize,
    pub t: f64,
    pub y: Vec<f64>,
}

/// Brackets the zero of the event function on one dense-output segment.
///
/// Uses Illinois-modified regula falsi with a bisection fallback whenever an
/// iterate fails to halve the bracket. The returned time is the end of the
/// final bracket on the far side of the crossing, so the event condition
/// already holds there. A zero sitting exactly on a sample is returned as is.
pub fn locate_event(segment: &DenseSegment<'_>, event: &EventSpec<'_>, tol: f64) -> Result<f64, SolverError> {
    let mut buf = vec![0.0; segment.y0.len()];
    let mut g = |t: f64| {
        segment.eval(t, &mut buf);
        (event.function)(t, &buf)
    };
    let (mut a, mut b) = (segment.t0, segment.t1);
    let mut ga = (event.function)(a, segment.y0);
    let mut gb = (event.function)(b, segment.y1);
    if gb == 0.0 {
        return Ok(b);
    }
    if ga == 0.0 {
        return Ok(a);
    }
    if ga.signum() == gb.signum() {
        return Err(SolverError::NoSignChange { t0: a, t1: b });
    }
    let mut side = 0i8;
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        let width = b - a;
        let mut c = (a * gb - b * ga) / (gb - ga);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let gc = g(c);
        if gc == 0.0 {
            return Ok(c);
        }
        if gc.signum() == gb.signum() {
            b = c;
            gb = gc;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        } else {
            a = c;
            ga = gc;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        }
        if b - a > 0.5 * width {
            let m = 0.5 * (a + b);
            let gm = g(m);
            if gm == 0.0 {
                return Ok(m);
            }
            if gm.signum() == gb.signum() {
                b = m;
                gb = gm;
            } else {
                a = m;
                ga = gm;
            }
            side = 0;
        }
    }
    Ok(b)
}
