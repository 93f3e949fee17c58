use prmt_core::data::{gen_synthetic, tokenize, SynthConfig, BOS, EOS, UNK};
use prmt_core::grounding::{build_phrase_image_set, GroundingPolicy, PatternChunker, PhraseRegionPair};
use prmt_core::latent::{
    anneal_weight, decoder_inputs, kl_diag_gaussians, mean_kl_per_pair, reparameterize, train_cvae, Cvae, CvaeConfig,
    CvaeTrainConfig, RepMode,
};
use prmt_neural::gradcheck::{grad_check, GradCheckConfig};
use prmt_neural::{Matrix, RngState, Tape};

fn pair(phrase: &str, feat: Vec<f64>) -> PhraseRegionPair {
    let phrase = tokenize(phrase);
    PhraseRegionPair { head: phrase.last().unwrap().clone(), phrase, feat, source_id: "s".into() }
}

fn toy_pairs(feat_dim: usize) -> Vec<PhraseRegionPair> {
    let mut rng = RngState::new(11);
    ["a red dog", "the blue car", "a dog", "small red car"]
        .iter()
        .map(|p| pair(p, (0..feat_dim).map(|_| rng.normal()).collect()))
        .collect()
}

fn tiny(feat_dim: usize) -> Cvae {
    let cfg = CvaeConfig { feat_dim, latent_dim: 3, hidden: 4, embed_dim: 3 };
    Cvae::new(cfg, Cvae::vocab_for(&toy_pairs(feat_dim)), 5).unwrap()
}

fn param(m: &Cvae, name: &str) -> Matrix {
    m.params.value(m.params.id(name).unwrap()).clone()
}

fn set(m: &mut Cvae, name: &str, f: impl Fn(usize, usize) -> f64) {
    let id = m.params.id(name).unwrap();
    let p = m.params.get_mut(id);
    for r in 0..p.values.rows() {
        for c in 0..p.values.cols() {
            p.values.set(r, c, f(r, c));
        }
    }
}

/// `x W + b` for a row vector.
fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.get(0, j) + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum::<f64>())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn gru(m: &Cvae, cell: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gi = affine(x, &param(m, &format!("{cell}.w_ih")), &param(m, &format!("{cell}.b_ih")));
    let gh = affine(h, &param(m, &format!("{cell}.w_hh")), &param(m, &format!("{cell}.b_hh")));
    let d = h.len();
    (0..d)
        .map(|j| {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[d + j] + gh[d + j]);
            let n = (gi[2 * d + j] + r * gh[2 * d + j]).tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn anneal_schedule() {
    assert_eq!(anneal_weight(0, 100), 0.0);
    assert_eq!(anneal_weight(50, 100), 0.5);
    assert_eq!(anneal_weight(100, 100), 1.0);
    assert_eq!(anneal_weight(1000, 100), 1.0);
    let mut prev = 0.0;
    for s in 0..300 {
        let w = anneal_weight(s, 120);
        assert!(w >= prev && (0.0..=1.0).contains(&w));
        prev = w;
    }
}

#[test]
fn kl_closed_form_cases() {
    let mu = [0.3, -1.2, 2.0];
    let sd = [0.5, 1.0, 2.0];
    assert_eq!(kl_diag_gaussians(&mu, &sd, &mu, &sd), 0.0);
    let delta = [0.5, -1.0, 2.0];
    let shifted: Vec<f64> = delta.iter().map(|d| d + 1.0).collect();
    let ones = [1.0; 3];
    let want = delta.iter().map(|d| d * d).sum::<f64>() / 2.0;
    assert!((kl_diag_gaussians(&shifted, &ones, &[1.0; 3], &ones) - want).abs() < 1e-12);
    assert!(kl_diag_gaussians(&mu, &[0.6, 1.0, 2.0], &mu, &sd) > 0.0);
}

fn log_normal(x: f64, mu: f64, sd: f64) -> f64 {
    -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = RngState::new(2024);
    for _ in 0..20 {
        let d = 4;
        let mq: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mp: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let sq: Vec<f64> = (0..d).map(|_| 0.5 + rng.uniform()).collect();
        let sp: Vec<f64> = (0..d).map(|_| 0.5 + rng.uniform()).collect();
        let exact = kl_diag_gaussians(&mq, &sq, &mp, &sp);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..d {
                let x = mq[i] + sq[i] * rng.normal();
                acc += log_normal(x, mq[i], sq[i]) - log_normal(x, mp[i], sp[i]);
            }
        }
        let mc = acc / n as f64;
        assert!((mc - exact).abs() / exact < 0.01, "mc {mc} vs exact {exact}");
    }
}

#[test]
fn reparameterization() {
    let mu = vec![1.0, -2.0, 0.5];
    let mut rng = RngState::new(1);
    assert_eq!(reparameterize(&mu, &[0.0; 3], &mut rng), mu);
    let sd = [0.5, 2.0, 1.0];
    let n = 100_000;
    let mut sum = [0.0; 3];
    for _ in 0..n {
        for (s, z) in sum.iter_mut().zip(reparameterize(&mu, &sd, &mut rng)) {
            *s += z;
        }
    }
    for i in 0..3 {
        let mean = sum[i] / n as f64;
        assert!((mean - mu[i]).abs() < 3.0 * sd[i] / (n as f64).sqrt(), "coord {i}: {mean}");
    }
}

#[test]
fn prior_is_affine_then_softplus() {
    let mut m = tiny(3);
    let v = [0.4, -1.0, 2.5];
    let (mu, sd) = m.prior(&v).unwrap();
    close(&mu, &affine(&v, &param(&m, "prior_mu.weight"), &param(&m, "prior_mu.bias")), 1e-12);
    let raw = affine(&v, &param(&m, "prior_sigma.weight"), &param(&m, "prior_sigma.bias"));
    close(&sd, &raw.iter().map(|&x| softplus(x)).collect::<Vec<_>>(), 1e-12);
    assert!(sd.iter().all(|&s| s > 0.0));

    for name in ["prior_mu.bias", "prior_sigma.bias"] {
        set(&mut m, name, |_, _| 0.0);
    }
    let (a, _) = m.prior(&v).unwrap();
    let (b, _) = m.prior(&v.map(|x| 2.0 * x)).unwrap();
    close(&b, &a.iter().map(|x| 2.0 * x).collect::<Vec<_>>(), 1e-12);

    for name in ["prior_mu.weight", "prior_sigma.weight"] {
        set(&mut m, name, |_, _| 0.0);
    }
    set(&mut m, "prior_mu.bias", |_, c| c as f64 - 1.0);
    set(&mut m, "prior_sigma.bias", |_, c| 0.5 * c as f64);
    let (mu, sd) = m.prior(&[9.0, 9.0, 9.0]).unwrap();
    assert_eq!(mu, vec![-1.0, 0.0, 1.0]);
    close(&sd, &[softplus(0.0), softplus(0.5), softplus(1.0)], 1e-15);
    assert!(m.prior(&[1.0]).is_err());
}

#[test]
fn posterior_unrolled_oracle() {
    let m = tiny(3);
    let v = [0.2, 0.1, -0.7];
    let dog = tokenize("dog");
    let (mu, sd) = m.posterior(&dog, &v).unwrap();
    let table = param(&m, "embed");
    let x = table.row(m.vocab.id("dog")).to_vec();
    let h = gru(&m, "post_rnn", &x, &[0.0; 4]);
    let joint: Vec<f64> = h.iter().chain(&v).copied().collect();
    close(&mu, &affine(&joint, &param(&m, "post_mu.weight"), &param(&m, "post_mu.bias")), 1e-12);
    let raw = affine(&joint, &param(&m, "post_sigma.weight"), &param(&m, "post_sigma.bias"));
    close(&sd, &raw.iter().map(|&x| softplus(x)).collect::<Vec<_>>(), 1e-12);

    let three = tokenize("a red dog");
    let mut h = vec![0.0; 4];
    for t in &three {
        h = gru(&m, "post_rnn", table.row(m.vocab.id(t)), &h);
    }
    let joint: Vec<f64> = h.iter().chain(&v).copied().collect();
    let (mu3, _) = m.posterior(&three, &v).unwrap();
    close(&mu3, &affine(&joint, &param(&m, "post_mu.weight"), &param(&m, "post_mu.bias")), 1e-12);

    assert_eq!(m.posterior(&three, &v).unwrap(), m.posterior(&three, &v).unwrap());
    let (other, _) = m.posterior(&tokenize("a red car"), &v).unwrap();
    assert_ne!(mu3, other);
    assert!(m.posterior(&[], &v).is_err());
}

#[test]
fn decode_init_is_affine() {
    let mut m = tiny(3);
    let z = [0.3, -0.2, 1.1];
    let v = [1.0, 0.0, -1.0];
    let joint: Vec<f64> = z.iter().chain(&v).copied().collect();
    let s = m.decode_init(&z, &v).unwrap();
    close(&s, &affine(&joint, &param(&m, "init.weight"), &param(&m, "init.bias")), 1e-12);
    assert!(m.decode_init(&[0.0; 2], &v).is_err());
    set(&mut m, "init.weight", |_, _| 0.0);
    let b = param(&m, "init.bias").row(0).to_vec();
    assert_eq!(m.decode_init(&z, &v).unwrap(), b);
    assert_eq!(m.decode_init(&[5.0; 3], &[-3.0; 3]).unwrap(), b);
}

#[test]
fn word_dropout_inputs() {
    let phrase = [7, 8, 9, 10];
    let mut rng = RngState::new(0);
    assert_eq!(decoder_inputs(&phrase, 0.0, &mut rng), vec![BOS, 7, 8, 9, 10]);
    assert_eq!(decoder_inputs(&phrase, 1.0, &mut rng), vec![BOS, UNK, UNK, UNK, UNK]);
    let long: Vec<usize> = vec![7; 20_000];
    let dropped = decoder_inputs(&long, 0.1, &mut rng).iter().filter(|&&t| t == UNK).count();
    assert!((1800..2200).contains(&dropped), "{dropped}");
}

#[test]
fn reconstruction_unrolled_oracle() {
    let m = tiny(3);
    let s = [0.1, -0.4, 0.3, 0.2];
    let phrase = tokenize("a red dog");
    let mut rng = RngState::new(3);
    let got = m.reconstruction_loss(&s, &phrase, 0.0, &mut rng).unwrap();
    let table = param(&m, "embed");
    let (w, b) = (param(&m, "out.weight"), param(&m, "out.bias"));
    let ids = m.vocab.encode(&phrase);
    let inputs: Vec<usize> = std::iter::once(BOS).chain(ids.iter().copied()).collect();
    let targets: Vec<usize> = ids.iter().copied().chain(std::iter::once(EOS)).collect();
    let mut h = s.to_vec();
    let mut nll = 0.0;
    for (&i, &t) in inputs.iter().zip(&targets) {
        h = gru(&m, "dec_rnn", table.row(i), &h);
        let logits = affine(&h, &w, &b);
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        nll += lse - logits[t];
    }
    assert!((got - nll / targets.len() as f64).abs() < 1e-12);
    assert!(m.reconstruction_loss(&s, &[], 0.0, &mut rng).is_err());
}

#[test]
fn elbo_gradient_check() {
    let pairs = toy_pairs(3);
    let mut m = tiny(3);
    let phrases: Vec<Vec<usize>> = pairs.iter().map(|p| m.encode_phrase(&p.phrase)).collect();
    let feats: Vec<&[f64]> = pairs.iter().map(|p| p.feat.as_slice()).collect();
    let train = CvaeTrainConfig { anneal_steps: 10, word_dropout: 0.25, ..CvaeTrainConfig::default() };
    let model = m.clone();
    let report = grad_check(
        &mut m.params,
        |store| {
            let mut tape = Tape::new(store);
            let mut rng = RngState::new(9);
            let t = model.elbo_on_tape(&mut tape, &phrases, &feats, 4, &train, &mut rng).unwrap();
            (tape.scalar(t.total), tape.backward(t.total))
        },
        &GradCheckConfig { samples_per_param: 20, ..GradCheckConfig::default() },
    );
    assert!(report.max_rel_error <= 1e-5, "{:?}", report.worst);
    assert!(report.per_param.len() >= 20);
}

#[test]
fn elbo_terms_combine() {
    let pairs = toy_pairs(3);
    let m = tiny(3);
    let phrases: Vec<Vec<usize>> = pairs.iter().map(|p| m.encode_phrase(&p.phrase)).collect();
    let feats: Vec<&[f64]> = pairs.iter().map(|p| p.feat.as_slice()).collect();
    let train = CvaeTrainConfig { anneal_steps: 8, word_dropout: 0.0, ..CvaeTrainConfig::default() };
    let mut tape = Tape::new(&m.params);
    let t = m.elbo_on_tape(&mut tape, &phrases, &feats, 4, &train, &mut RngState::new(1)).unwrap();
    assert_eq!(t.anneal_weight, 0.5);
    assert_eq!(t.tokens, 4 + 4 + 3 + 4);
    assert!(t.kl_sum >= 0.0);
    let want = (t.recon_sum + 0.5 * t.kl_sum) / t.tokens as f64;
    assert!((tape.scalar(t.total) - want).abs() < 1e-12);
}

#[test]
fn memorizes_a_single_pair() {
    let pairs = vec![pair("a red dog", vec![0.5, -0.5, 1.0, 0.0])];
    let cfg = CvaeTrainConfig {
        batch_size: 1,
        learning_rate: 1e-2,
        epochs: 300,
        anneal_steps: 1_000_000,
        word_dropout: 0.0,
        seed: 0,
        clip_grad_norm: None,
    };
    let res = train_cvae(&pairs, CvaeConfig { feat_dim: 4, latent_dim: 4, hidden: 16, embed_dim: 8 }, &cfg).unwrap();
    assert!(res.log.last().unwrap().recon < 0.01, "{:?}", res.log.last());
    assert_eq!(res.steps, 300);
    assert_eq!(res.model.reconstruction_accuracy(&pairs).unwrap(), 1.0);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let pairs = toy_pairs(3);
    let model_cfg = CvaeConfig { feat_dim: 3, latent_dim: 2, hidden: 6, embed_dim: 4 };
    let cfg = CvaeTrainConfig { batch_size: 2, epochs: 5, seed: 4, ..CvaeTrainConfig::default() };
    let a = train_cvae(&pairs, model_cfg.clone(), &cfg).unwrap();
    let b = train_cvae(&pairs, model_cfg.clone(), &cfg).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cvae.ckpt");
    a.model.save(&path, 4, a.steps).unwrap();
    let back = Cvae::load(&path).unwrap();
    let values = |m: &Cvae| m.params.iter().map(|p| p.values.clone()).collect::<Vec<_>>();
    assert_eq!(values(&back), values(&a.model));
    assert_eq!(back.infer_reps(&pairs, RepMode::Posterior).unwrap(), a.model.infer_reps(&pairs, RepMode::Posterior).unwrap());
    assert_eq!(back.to_bytes(4, a.steps).unwrap(), std::fs::read(&path).unwrap());

    assert!(train_cvae(&[], model_cfg.clone(), &cfg).is_err());
    let bad = CvaeTrainConfig { word_dropout: 1.0, ..cfg };
    assert!(train_cvae(&pairs, model_cfg, &bad).is_err());
}

#[test]
fn inference_is_deterministic_and_zero_noise_collapses() {
    let synth = SynthConfig { sentences: 60, noise_sigma: 0.0, seed: 3, ..SynthConfig::default() };
    let corpus = gen_synthetic(&synth).unwrap().pairs;
    let chunker = PatternChunker::synthetic();
    let (pairs, _) = build_phrase_image_set(&corpus, &chunker, &chunker, GroundingPolicy::Skip).unwrap();
    let m = Cvae::new(CvaeConfig::desk(synth.feature_dim()), Cvae::vocab_for(&pairs), 0).unwrap();
    let reps = m.infer_reps(&pairs, RepMode::Posterior).unwrap();
    assert_eq!(reps, m.infer_reps(&pairs, RepMode::Posterior).unwrap());
    assert_eq!(m.infer_rep(&pairs[3]).unwrap(), reps[3]);
    let mut checked = 0;
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            if pairs[i].phrase == pairs[j].phrase {
                assert_eq!(reps[i], reps[j]);
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
    let prior = m.infer_reps(&pairs, RepMode::Prior).unwrap();
    assert_eq!(prior.len(), pairs.len());
    assert_ne!(prior[0], reps[0]);
    assert!(mean_kl_per_pair(&m, &pairs).unwrap() >= 0.0);
}
