#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dpformer/encoder.hpp"
#include "dpformer/finite_diff.hpp"
#include "dpformer/head_losses.hpp"

using namespace dpformer;

namespace {

TokenSequence random_tokens(Rng& rng, std::int64_t batch, std::int64_t n, std::int64_t d) {
    TokenSequence s;
    s.tokens = Tensor({batch * n, d});
    for (std::int64_t i = 0; i < s.tokens.numel(); ++i)
        s.tokens.data()[i] = rng.uniform() * 2.0 - 1.0;
    s.batch = batch;
    s.length = n;
    return s;
}

Tensor random_probs(Rng& rng, std::int64_t b, std::int64_t k) {
    Tensor t({b, k});
    for (std::int64_t r = 0; r < b; ++r) {
        double sum = 0.0;
        for (std::int64_t c = 0; c < k; ++c) {
            t.at(r, c) = 0.05 + rng.uniform();
            sum += t.at(r, c);
        }
        for (std::int64_t c = 0; c < k; ++c) t.at(r, c) /= sum;
    }
    return t;
}

Tensor onehot_rows(const std::vector<std::int64_t>& hot, std::int64_t k) {
    Tensor t({static_cast<std::int64_t>(hot.size()), k});
    for (std::size_t r = 0; r < hot.size(); ++r) t.at(static_cast<std::int64_t>(r), hot[r]) = 1.0;
    return t;
}

Tensor grad_of(const Tensor& x) {
    Tensor g(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) g.data()[i] = x.grad_at(i);
    return g;
}

LabelClassifier make_label(Rng& rng, std::int64_t classes, std::int64_t d) {
    LabelClassifier label;
    grow_label_classifier(label, classes, d, rng);
    return label;
}

}  // namespace

TEST_CASE("zero heads classify uniformly and probabilities sum to one") {
    Rng rng(50);
    LabelClassifier label = make_label(rng, 4, 6);
    AuxClassifier aux = AuxClassifier::init(rng, 6, 2);
    for (Tensor* t : {&label.w, &label.b, &aux.w, &aux.b})
        for (std::int64_t i = 0; i < t->numel(); ++i) t->data()[i] = 0.0;

    TokenSequence z = random_tokens(rng, 3, 5, 6);
    Tape tape(false);
    ClassifyResult r = classify(tape, z, label, &aux);
    for (std::int64_t b = 0; b < 3; ++b) {
        for (std::int64_t c = 0; c < 4; ++c)
            CHECK(r.label_probs.at(b, c) == doctest::Approx(0.25).epsilon(1e-12));
        for (std::int64_t c = 0; c < 3; ++c)
            CHECK(r.aux_probs.at(b, c) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }

    Rng rng2(51);
    LabelClassifier label2 = make_label(rng2, 5, 6);
    AuxClassifier aux2 = AuxClassifier::init(rng2, 6, 3);
    ClassifyResult r2 = classify(tape, z, label2, &aux2);
    for (std::int64_t b = 0; b < 3; ++b) {
        double s1 = 0.0, s2 = 0.0;
        for (std::int64_t c = 0; c < 5; ++c) s1 += r2.label_probs.at(b, c);
        for (std::int64_t c = 0; c < 4; ++c) s2 += r2.aux_probs.at(b, c);
        CHECK(std::abs(s1 - 1.0) <= 1e-12);
        CHECK(std::abs(s2 - 1.0) <= 1e-12);
    }
}

TEST_CASE("classify gradient reaches upstream encoder weights") {
    Rng rng(52);
    EncoderLayer enc = make_msa_encoder_layer(rng, 4, 2);
    LabelClassifier label = make_label(rng, 3, 4);
    TokenSequence z = random_tokens(rng, 2, 3, 4);
    Tensor targets = onehot_rows({0, 2}, 3);

    auto loss_value = [&]() {
        Tape t(false);
        TokenSequence enc_out = encoder_layer_forward(t, z, enc);
        ClassifyResult r = classify(t, enc_out, label);
        return loss_bce(t, r.label_probs, targets).scalar_value();
    };

    Tape tape;
    TokenSequence enc_out = encoder_layer_forward(tape, z, enc);
    ClassifyResult r = classify(tape, enc_out, label);
    tape.backward(loss_bce(tape, r.label_probs, targets));

    for (Tensor target : {enc.attn.wq, enc.mlp.w1, label.w}) {
        Tensor analytic = grad_of(target);
        auto run_with = [&](const Tensor& value) {
            Tensor saved = target.clone();
            target.copy_data_from(value);
            const double v = loss_value();
            target.copy_data_from(saved);
            return v;
        };
        Tensor numeric = finite_diff_grad([&](const Tensor& p) { return run_with(p); }, target, 1e-5);
        CHECK(max_rel_err(analytic, numeric) <= 1e-3);
    }
}

TEST_CASE("label bce matches hand arithmetic and a scalar-loop oracle") {
    Tape tape(false);

    Tensor perfect = onehot_rows({1, 0}, 2);
    CHECK(loss_bce(tape, perfect, perfect).scalar_value() <= 1e-10);

    Tensor half = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor y = onehot_rows({0}, 2);
    CHECK(loss_bce(tape, half, y).scalar_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Rng rng(53);
    Tensor probs = random_probs(rng, 4, 5);
    Tensor labels = onehot_rows({3, 0, 4, 1}, 5);
    double oracle = 0.0;
    for (std::int64_t i = 0; i < 4; ++i) {
        double inner = 0.0;
        for (std::int64_t j = 0; j < 5; ++j) {
            const double yy = labels.at(i, j);
            const double pp = probs.at(i, j);
            inner += yy * std::log(pp) + (1.0 - yy) * std::log(1.0 - pp);
        }
        oracle += -inner / 5.0;
    }
    oracle /= 4.0;
    CHECK(std::abs(loss_bce(tape, probs, labels).scalar_value() - oracle) <= 1e-12);

    Tensor bad = Tensor::from_data({1, 2}, {0.5, 0.5});
    CHECK_THROWS_AS(loss_bce(tape, half, bad), ContractError);
    Tensor two_hot = Tensor::from_data({1, 2}, {1.0, 1.0});
    CHECK_THROWS_AS(loss_bce(tape, half, two_hot), ContractError);
}

TEST_CASE("distillation loss matches hand arithmetic and an oracle") {
    Tape tape(false);

    Tensor same = Tensor::from_data({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.3, 0.1});
    CHECK(std::abs(loss_kd(tape, same, same, 3).scalar_value()) <= 1e-12);

    Tensor cur = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor prev = Tensor::from_data({1, 2}, {0.25, 0.75});
    const double hand = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    CHECK(loss_kd(tape, cur, prev, 2).scalar_value() == doctest::Approx(hand).epsilon(1e-12));

    // Wider outputs than the slice: both sides renormalize before the KL.
    Rng rng(54);
    Tensor wide_cur = random_probs(rng, 3, 6);
    Tensor wide_prev = random_probs(rng, 3, 4);
    const std::int64_t kprev = 4;
    double oracle = 0.0;
    for (std::int64_t i = 0; i < 3; ++i) {
        double sp = 0.0, sq = 0.0;
        for (std::int64_t j = 0; j < kprev; ++j) {
            sp += wide_cur.at(i, j);
            sq += wide_prev.at(i, j);
        }
        for (std::int64_t j = 0; j < kprev; ++j) {
            const double p = wide_cur.at(i, j) / sp;
            const double q = wide_prev.at(i, j) / sq;
            oracle += p * std::log(p / q);
        }
    }
    oracle /= 3.0;
    CHECK(std::abs(loss_kd(tape, wide_cur, wide_prev, kprev).scalar_value() - oracle) <= 1e-12);

    CHECK_THROWS_AS(loss_kd(tape, cur, prev, 0), ContractError);
}

TEST_CASE("aux loss averages over the extra slot too") {
    Tape tape(false);

    Tensor perfect = onehot_rows({0, 2}, 3);
    CHECK(loss_aux(tape, perfect, perfect).scalar_value() <= 1e-10);

    Tensor half = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor ext = onehot_rows({0}, 2);
    CHECK(loss_aux(tape, half, ext).scalar_value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Rng rng(55);
    Tensor probs = random_probs(rng, 4, 3);
    Tensor targets = onehot_rows({0, 1, 2, 0}, 3);
    double oracle = 0.0;
    for (std::int64_t i = 0; i < 4; ++i) {
        double inner = 0.0;
        for (std::int64_t j = 0; j < 3; ++j) {
            const double yy = targets.at(i, j);
            const double pp = probs.at(i, j);
            inner += yy * std::log(pp) + (1.0 - yy) * std::log(1.0 - pp);
        }
        oracle += -inner / 3.0;
    }
    oracle /= 4.0;
    CHECK(std::abs(loss_aux(tape, probs, targets).scalar_value() - oracle) <= 1e-12);
}

TEST_CASE("aux targets route rehearsal to the extra slot") {
    CHECK(aux_slot_for(3, 4, 2) == 0);
    CHECK(aux_slot_for(0, 4, 2) == 0);
    CHECK(aux_slot_for(4, 4, 2) == 1);
    CHECK(aux_slot_for(5, 4, 2) == 2);
    CHECK_THROWS_AS(aux_slot_for(6, 4, 2), ContractError);
    CHECK_THROWS_AS(aux_slot_for(-1, 4, 2), ContractError);
}

TEST_CASE("loss mixture follows the class-fraction weighting") {
    Tape tape(false);
    Tensor bce = Tensor::scalar(1.0);
    Tensor kd = Tensor::scalar(2.0);
    Tensor aux = Tensor::scalar(3.0);

    LossWeights first = LossWeights::for_task(0, 10);
    CHECK(first.alpha == 0.0);
    CHECK(total_loss(tape, bce, Tensor::scalar(0.0), aux, first).scalar_value() ==
          doctest::Approx(1.0 + 0.1 * 3.0).epsilon(1e-15));

    LossWeights second = LossWeights::for_task(10, 20);
    CHECK(second.alpha == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(total_loss(tape, bce, kd, aux, second).scalar_value() ==
          doctest::Approx(1.8).epsilon(1e-12));

    // Doubling lambda doubles exactly the aux share.
    LossWeights doubled = second;
    doubled.lambda = 0.2;
    const double base = total_loss(tape, bce, kd, Tensor::scalar(0.0), second).scalar_value();
    CHECK(total_loss(tape, bce, kd, aux, doubled).scalar_value() - base ==
          doctest::Approx(2.0 * (total_loss(tape, bce, kd, aux, second).scalar_value() - base))
              .epsilon(1e-12));

    LossWeights bad;
    bad.alpha = 1.0;
    CHECK_THROWS_AS(total_loss(tape, bce, kd, aux, bad), ContractError);
    CHECK_THROWS_AS(LossWeights::for_task(10, 10), ContractError);
}

TEST_CASE("label head growth preserves old rows bitwise") {
    Rng rng(56);
    LabelClassifier label = make_label(rng, 10, 8);
    CHECK(label.classes() == 10);
    CHECK(label.param_count() == 10 * 9);

    Tensor old_w = label.w.clone();
    Tensor old_b = label.b.clone();
    grow_label_classifier(label, 10, 8, rng);
    CHECK(label.classes() == 20);
    CHECK(label.param_count() - 10 * 9 == 10 * (8 + 1));
    for (std::int64_t r = 0; r < 10; ++r) {
        CHECK(label.b.at(r) == old_b.at(r));
        for (std::int64_t c = 0; c < 8; ++c) CHECK(label.w.at(r, c) == old_w.at(r, c));
    }
}

TEST_CASE("composed loss gradient matches finite differences") {
    Rng rng(57);
    EncoderLayer enc = make_msa_encoder_layer(rng, 4, 2);
    LabelClassifier label = make_label(rng, 4, 4);
    AuxClassifier aux = AuxClassifier::init(rng, 4, 2);
    TokenSequence z = random_tokens(rng, 2, 3, 4);
    Tensor y = onehot_rows({1, 3}, 4);
    Tensor teacher = random_probs(rng, 2, 2);
    Tensor aux_y = onehot_rows({1, 0}, 3);
    LossWeights w = LossWeights::for_task(2, 4);

    auto loss_value = [&]() {
        Tape t(false);
        TokenSequence enc_out = encoder_layer_forward(t, z, enc);
        ClassifyResult r = classify(t, enc_out, label, &aux);
        Tensor bce = loss_bce(t, r.label_probs, y);
        Tensor kd = loss_kd(t, r.label_probs, teacher, 2);
        Tensor ax = loss_aux(t, r.aux_probs, aux_y);
        return total_loss(t, bce, kd, ax, w).scalar_value();
    };

    Tape tape;
    TokenSequence enc_out = encoder_layer_forward(tape, z, enc);
    ClassifyResult r = classify(tape, enc_out, label, &aux);
    Tensor bce = loss_bce(tape, r.label_probs, y);
    Tensor kd = loss_kd(tape, r.label_probs, teacher, 2);
    Tensor ax = loss_aux(tape, r.aux_probs, aux_y);
    tape.backward(total_loss(tape, bce, kd, ax, w));

    for (Tensor target : {label.w, aux.w, enc.attn.wv}) {
        Tensor analytic = grad_of(target);
        auto run_with = [&](const Tensor& value) {
            Tensor saved = target.clone();
            target.copy_data_from(value);
            const double v = loss_value();
            target.copy_data_from(saved);
            return v;
        };
        Tensor numeric = finite_diff_grad([&](const Tensor& p) { return run_with(p); }, target, 1e-5);
        CHECK(max_rel_err(analytic, numeric) <= 1e-3);
    }
}
