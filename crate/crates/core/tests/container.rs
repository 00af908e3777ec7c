use qmoe::container::{decode_model, encode_model, load_model, save_model, Model};
use qmoe::error::Error;
use qmoe::expert::{ExpertConfig, ExpertNet};
use qmoe::moe::{MoEModel, RouterNet, RoutingConfig, RoutingMode};
use qmoe::nn::ForwardMode;
use qmoe::quant::QuantScheme;
use qmoe::tensor::Rng;

fn schemes() -> Vec<QuantScheme> {
    vec![
        QuantScheme::Float32,
        QuantScheme::bitlinear(2).unwrap(),
        QuantScheme::bitlinear(4).unwrap(),
        QuantScheme::bitlinear(8).unwrap(),
        QuantScheme::bitlinear(16).unwrap(),
        QuantScheme::Ternary,
        QuantScheme::BitwiseBinary,
    ]
}

fn expert(scheme: QuantScheme, rng: &mut Rng) -> ExpertNet {
    ExpertNet::new(ExpertConfig::with_hidden(5, &[24, 12], scheme), rng).unwrap()
}

fn mixture(seed: u64) -> MoEModel {
    let mut rng = Rng::new(seed);
    let experts = vec![
        expert(QuantScheme::BitwiseBinary, &mut rng),
        expert(QuantScheme::bitlinear(16).unwrap(), &mut rng),
        expert(QuantScheme::Ternary, &mut rng),
    ];
    let router = RouterNet::new(3, &mut rng).unwrap();
    let config = RoutingConfig {
        k: 2,
        temperature: 0.7,
        entropy_gate: Some(0.3),
        ..Default::default()
    };
    MoEModel::new(experts, router, config).unwrap()
}

fn inputs(seed: u64, n: usize) -> Vec<Vec<f32>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (0..1024).map(|_| rng.normal() as f32).collect()).collect()
}

fn reload(model: &Model) -> Model {
    decode_model(&encode_model(model).unwrap()).unwrap()
}

#[test]
fn experts_round_trip_bitwise() {
    let mut rng = Rng::new(1);
    let xs = inputs(2, 20);
    for scheme in schemes() {
        let net = expert(scheme, &mut rng);
        let Model::Expert(back) = reload(&Model::Expert(net.clone())) else {
            panic!("kind changed");
        };
        for z in &xs {
            let a = net.forward(z, ForwardMode::Eval, None).unwrap();
            let b = back.forward(z, ForwardMode::Eval, None).unwrap();
            let (a, b): (Vec<u32>, Vec<u32>) = (a.iter().map(|v| v.to_bits()).collect(), b.iter().map(|v| v.to_bits()).collect());
            assert_eq!(a, b, "{scheme:?}");
        }
    }
}

#[test]
fn mixtures_round_trip_in_both_routing_modes() {
    let model = mixture(3);
    let Model::Mixture(back) = reload(&Model::Mixture(model.clone())) else {
        panic!("kind changed");
    };
    assert_eq!(back.config(), model.config());
    for (i, z) in inputs(4, 20).iter().enumerate() {
        for mode in [RoutingMode::Uniform, RoutingMode::Curious] {
            let (a, da) = model.route(z, mode, &mut Rng::new(i as u64)).unwrap();
            let (b, db) = back.route(z, mode, &mut Rng::new(i as u64)).unwrap();
            assert_eq!(a, b);
            assert_eq!(da, db);
        }
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(5);
    let models = vec![Model::Expert(expert(QuantScheme::bitlinear(4).unwrap(), &mut rng)), Model::Mixture(mixture(6))];
    for (i, m) in models.iter().enumerate() {
        let p1 = dir.path().join(format!("m{i}.cqmf"));
        let p2 = dir.path().join(format!("m{i}-again.cqmf"));
        save_model(m, &p1).unwrap();
        save_model(&load_model(&p1).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(&std::fs::read(&p1).unwrap()[..4], b"CQMF");
    }
}

#[test]
fn any_flipped_byte_is_refused() {
    let mut rng = Rng::new(7);
    let bytes = encode_model(&Model::Expert(expert(QuantScheme::bitlinear(2).unwrap(), &mut rng))).unwrap();
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 1 << (i % 8);
        let err = decode_model(&bad).unwrap_err();
        // Past the magic, version and length the checksum is what catches it.
        if (14..bytes.len() - 4).contains(&i) {
            assert!(matches!(err, Error::Checksum { .. }), "byte {i}: {err}");
        }
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn version_checksum_and_truncation_are_distinct_errors() {
    let mut rng = Rng::new(8);
    let bytes = encode_model(&Model::Expert(expert(QuantScheme::Ternary, &mut rng))).unwrap();
    let mut future = bytes.clone();
    future[4] = 9;
    assert!(matches!(decode_model(&future).unwrap_err(), Error::UnknownVersion(9)));
    assert!(matches!(decode_model(&bytes[..bytes.len() - 1]).unwrap_err(), Error::Truncated(_)));
    assert!(matches!(decode_model(&bytes[..10]).unwrap_err(), Error::Truncated(_)));
    let mut crc = bytes.clone();
    *crc.last_mut().unwrap() ^= 0xff;
    assert!(matches!(decode_model(&crc).unwrap_err(), Error::Checksum { .. }));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(decode_model(&magic).unwrap_err(), Error::Format(_)));
}

#[test]
fn failed_saves_leave_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(9);
    let m = Model::Expert(expert(QuantScheme::Float32, &mut rng));
    assert!(save_model(&m, std::path::Path::new("")).is_err());
    let missing = dir.path().join("no-such-dir").join("m.cqmf");
    assert!(save_model(&m, &missing).is_err());
    assert!(!missing.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    assert!(load_model(&dir.path().join("absent.cqmf")).is_err());
}
