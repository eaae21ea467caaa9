use lunet::data::{gaussian_mixture, MixtureSpec};
use lunet::model::{init_net, InitScheme};
use lunet::train::{fit, NoMetrics, TrainConfig};

#[test]
fn trained_mixture_samples_land_near_the_centers() {
    let spec = MixtureSpec::default();
    let (train, _) = gaussian_mixture(&spec).unwrap();
    let mut net = init_net(12, 2, 0, InitScheme::Standard).unwrap();
    fit(&mut net, &train, &TrainConfig::mixture(40), &mut NoMetrics).unwrap();
    let samples = net.sample(1000, 11).unwrap();
    let near = samples
        .iter()
        .filter(|x| {
            spec.centers
                .iter()
                .any(|c| ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt() <= 4.0 * spec.sigma)
        })
        .count();
    assert!(near >= 950, "{near} of 1000 samples within 4 sigma of a center");
}
