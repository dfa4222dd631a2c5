//! `C = α·F + (1 − α)·B`.

use crate::error::{Error, Result};
use crate::image::{AlphaMatte, ImageBuffer};
use crate::tensor::Tensor3;

fn check(alpha: &AlphaMatte, img: &ImageBuffer, what: &str) -> Result<()> {
    if !alpha.dims().spatial_eq(&img.dims()) {
        return Err(Error::shape(format!(
            "{what} {} does not match matte {}",
            img.dims(),
            alpha.dims()
        )));
    }
    Ok(())
}

/// Composites `fg` over `bg`; the single-channel matte is broadcast over
/// colour channels.
pub fn composite(alpha: &AlphaMatte, fg: &ImageBuffer, bg: &ImageBuffer) -> Result<ImageBuffer> {
    check(alpha, fg, "foreground")?;
    check(alpha, bg, "background")?;
    if fg.channels() != bg.channels() {
        return Err(Error::shape("foreground and background channel counts differ"));
    }
    let out = Tensor3::from_fn(fg.dims(), |c, y, x| {
        let a = alpha.get(y, x);
        a * fg.tensor().get(c, y, x) + (1.0 - a) * bg.tensor().get(c, y, x)
    });
    ImageBuffer::new(out)
}

/// Mean absolute deviation of `c` from `composite(alpha, fg, bg)`.
pub fn residual(c: &ImageBuffer, alpha: &AlphaMatte, fg: &ImageBuffer, bg: &ImageBuffer) -> Result<f64> {
    let expected = composite(alpha, fg, bg)?;
    if c.dims() != expected.dims() {
        return Err(Error::shape(format!(
            "composite {} does not match {}",
            c.dims(),
            expected.dims()
        )));
    }
    let diff = c.tensor().zip_map(expected.tensor(), |a, b| (a - b).abs())?;
    Ok(diff.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    fn img(v: f64) -> ImageBuffer {
        ImageBuffer::filled(3, 2, 3, v).unwrap()
    }

    #[test]
    fn extremes_select_layers() {
        let fg = ImageBuffer::new(crate::rng::SeededRng::new(1).randn(Dims::new(3, 2, 3)).unwrap()).unwrap();
        let bg = img(0.25);
        assert_eq!(composite(&AlphaMatte::filled(2, 3, 1.0), &fg, &bg).unwrap(), fg);
        assert_eq!(composite(&AlphaMatte::filled(2, 3, 0.0), &fg, &bg).unwrap(), bg);
    }

    #[test]
    fn half_alpha() {
        let c = composite(&AlphaMatte::filled(2, 3, 0.5), &img(1.0), &img(0.0)).unwrap();
        assert!(c.tensor().data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn residual_fixtures() {
        let a = AlphaMatte::filled(2, 3, 0.3);
        let (fg, bg) = (img(1.0), img(0.0));
        let c = composite(&a, &fg, &bg).unwrap();
        assert_eq!(residual(&c, &a, &fg, &bg).unwrap(), 0.0);
        let shifted = AlphaMatte::filled(2, 3, 0.4);
        assert!((residual(&c, &shifted, &fg, &bg).unwrap() - 0.1).abs() < 1e-12);
        let same = img(0.6);
        let r1 = residual(&c, &a, &same, &same).unwrap();
        let r2 = residual(&c, &shifted, &same, &same).unwrap();
        assert_eq!(r1, r2);
        assert!((r1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn size_mismatch() {
        let a = AlphaMatte::filled(2, 2, 0.3);
        assert!(matches!(composite(&a, &img(1.0), &img(0.0)), Err(Error::Shape(_))));
    }
}
