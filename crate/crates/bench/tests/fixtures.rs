use cim_bench::{random_images, trainer, SIZE};

#[test]
fn fixtures_build_and_step() {
    let images = random_images(2, SIZE, 0);
    assert_eq!(images[1].height(), SIZE);
    assert_ne!(images[0].data(), images[1].data());
    let mut t = trainer(2);
    let m = t.joint_step_on(&images).unwrap();
    assert!(m.mim_loss.is_finite() && m.enhancer_loss.is_finite());
}
