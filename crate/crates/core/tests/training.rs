use gngan::nn::Mlp;
use gngan::objectives::{GeneratorVariant, HyperParams};
use gngan::synth::{grid25_spec, sample_data, sample_prior};
use gngan::train::{Architecture, GnGanModel};
use gngan::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(hp: &HyperParams, seed: u64) -> (GnGanModel, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = GnGanModel::init(&Architecture::grid(2, 2), hp, &mut rng).unwrap();
    (m, rng)
}

fn bits(net: &Mlp) -> Vec<u64> {
    net.params().iter().flat_map(|p| p.as_slice().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn phases_only_touch_their_own_networks() {
    for variant in GeneratorVariant::ALL {
        let hp = HyperParams {
            batch_size: 16,
            generator_variant: variant,
            ..Default::default()
        };
        let (mut m, mut rng) = model(&hp, 3);
        let x = sample_data(&grid25_spec(), 16, &mut rng);
        let z = sample_prior(2, 16, &mut rng);

        let (e0, g0, d0) = (bits(&m.encoder), bits(&m.generator), bits(&m.discriminator));
        m.ae_phase(&x, &z, &hp).unwrap();
        assert_eq!(bits(&m.discriminator), d0);
        assert_ne!(bits(&m.generator), g0);
        assert_ne!(bits(&m.encoder), e0);

        let (e1, g1, d1) = (bits(&m.encoder), bits(&m.generator), bits(&m.discriminator));
        m.d_phase(&x, &z, &hp, &mut rng).unwrap();
        assert_eq!(bits(&m.encoder), e1);
        assert_eq!(bits(&m.generator), g1);
        assert_ne!(bits(&m.discriminator), d1);

        let (e2, g2, d2) = (bits(&m.encoder), bits(&m.generator), bits(&m.discriminator));
        m.g_phase(&x, &z, &hp).unwrap();
        assert_eq!(bits(&m.encoder), e2);
        assert_eq!(bits(&m.discriminator), d2);
        assert_ne!(bits(&m.generator), g2);
    }
}

#[test]
fn autoencoder_loss_trends_down() {
    let hp = HyperParams::default();
    let (mut m, mut rng) = model(&hp, 0);
    let data = sample_data(&grid25_spec(), 50_000, &mut rng);
    let mut losses = Vec::with_capacity(2000);
    for it in 0..2000usize {
        let start = (it * hp.batch_size) % (data.rows() - hp.batch_size);
        let x = data.slice_rows(start, start + hp.batch_size);
        let z = sample_prior(2, hp.batch_size, &mut rng);
        let d = m.train_step(&x, &z, &hp, &mut rng).unwrap();
        losses.push(d.v_ae.unwrap());
    }
    let median = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        0.5 * (v[49] + v[50])
    };
    let first = median(&losses[..100]);
    let last = median(&losses[1900..]);
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn non_finite_loss_names_the_phase() {
    let hp = HyperParams {
        batch_size: 8,
        lr: 1e300,
        ..Default::default()
    };
    let (mut m, mut rng) = model(&hp, 1);
    let mut err = None;
    for _ in 0..10 {
        let x = sample_data(&grid25_spec(), 8, &mut rng);
        let z = sample_prior(2, 8, &mut rng);
        if let Err(e) = m.train_step(&x, &z, &hp, &mut rng) {
            err = Some(e);
            break;
        }
    }
    match err {
        Some(Error::Phase { phase, .. }) => {
            assert!(["autoencoder", "discriminator", "generator"].contains(&phase))
        }
        other => panic!("expected a phase error, got {other:?}"),
    }
}

#[test]
fn learning_rate_decays_stepwise() {
    let hp = HyperParams {
        batch_size: 8,
        lr_decay_every: 2,
        lr_decay_base: 0.5,
        ..Default::default()
    };
    let (mut m, mut rng) = model(&hp, 2);
    let x = sample_data(&grid25_spec(), 8, &mut rng);
    let z = sample_prior(2, 8, &mut rng);
    let lrs: Vec<f64> = (0..5).map(|_| m.train_step(&x, &z, &hp, &mut rng).unwrap().lr).collect();
    assert_eq!(lrs, vec![0.001, 0.001, 0.0005, 0.0005, 0.00025]);
}
