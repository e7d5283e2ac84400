use super::pad::{crop_to, pad_reflect_to_multiple};
use super::ppm::Image;
use crate::error::Result;
use crate::model::{Model, SIZE_MULTIPLE};

/// Reflect-pads to the network's size multiple, runs the model and crops
/// back to the original extent. Gray images are restored as RGB.
pub fn restore_image(model: &Model, img: &Image) -> Result<Image> {
    let x = img.to_rgb().to_tensor::<f32>();
    let (padded, (h, w)) = pad_reflect_to_multiple(&x, SIZE_MULTIPLE);
    let y = model.restore(&padded)?;
    Image::from_tensor(&crop_to(&y, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_tail_returns_input_pixels() {
        let mut m = Model::new(&ModelConfig::tiny(8), 3).unwrap();
        m.net.tail.zero(&mut m.params);
        let data: Vec<u8> = (0..21 * 13 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = Image::new(21, 13, 3, data).unwrap();
        assert_eq!(restore_image(&m, &img).unwrap(), img);
    }
}
