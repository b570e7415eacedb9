#include "skipalign/trainer.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

#include "skipalign/prototypes.hpp"

namespace skipalign {

double lr_at(std::int64_t step, std::int64_t total_steps, double lr0) {
  if (total_steps <= 0) return lr0;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

void add_block(Mat& dst, std::size_t row0, const Mat& src, double scale) {
  if (src.rows() == 0 || scale == 0.0) return;
  for (std::size_t r = 0; r < src.rows(); ++r) {
    auto d = dst.row(row0 + r);
    auto s = src.row(r);
    for (std::size_t c = 0; c < s.size(); ++c) d[c] += scale * s[c];
  }
}

void add_ova(OutputGrad& g, std::size_t row0, const OvaGrad& src, double scale) {
  add_block(g.d_id, row0, src.d_id, scale);
  add_block(g.d_ood, row0, src.d_ood, scale);
}

PrototypeAudit audit_of(const PrototypeSet& p, std::int64_t epoch) {
  return {epoch, p.n_l, p.n_u, p.w_l_norm, p.w_u_norm};
}

nlohmann::json report_json(const LossReport& r) {
  nlohmann::json terms = nlohmann::json::object();
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& t : r.terms) {
    terms[t.name] = t.value;
    weights[t.name] = t.weight;
  }
  return {{"terms", terms}, {"weights", weights}, {"total", r.total}};
}

nlohmann::json audit_json(const PrototypeAudit& a) {
  return {{"epoch", a.epoch},
          {"n_l", a.n_l},
          {"n_u", a.n_u},
          {"w_l_norm", a.w_l_norm},
          {"w_u_norm", a.w_u_norm}};
}

}  // namespace

nlohmann::json to_json(const IterationRecord& r) {
  nlohmann::json j = {{"event", "iteration"},
                      {"epoch", r.epoch},
                      {"iter", r.iter},
                      {"step", r.step},
                      {"lr", r.lr},
                      {"loss", report_json(r.report)},
                      {"sna", report_json(r.sna_report)},
                      {"gate_accepted", r.gate_accepted},
                      {"pl_accepted", r.pl_accepted},
                      {"negatives", r.negatives},
                      {"proto_pool_added", r.proto_pool_added}};
  if (r.gate) {
    j["gate"] = {{"tau_id", r.gate->tau_id},
                 {"eta_id", r.gate->eta_id},
                 {"phi", r.gate->phi},
                 {"cc_conf", r.gate->cc_conf},
                 {"od_conf", r.gate->od_conf},
                 {"pred_class", r.gate->pred_class}};
  }
  return j;
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"event", "epoch"}, {"epoch", r.epoch}, {"prototypes", audit_json(r.audit)},
          {"metrics", r.metrics}};
}

void write_jsonl(std::ostream& os, const RunLog& log) {
  os << nlohmann::json{{"event", "init"}, {"prototypes", audit_json(log.initial)}}.dump() << '\n';
  std::size_t it = 0;
  for (const auto& e : log.epochs) {
    while (it < log.iterations.size() && log.iterations[it].epoch <= e.epoch) {
      os << to_json(log.iterations[it++]).dump() << '\n';
    }
    os << to_json(e).dump() << '\n';
  }
  while (it < log.iterations.size()) os << to_json(log.iterations[it++]).dump() << '\n';
}

LossEval batch_objective(const ForwardOutput& out, const BatchLayout& layout,
                         std::span<const ClassIndex> labels, const PrototypeSet& protos,
                         const TrainConfig& cfg, BatchDiagnostics* diag) {
  const HeadWeights& hw = cfg.head;
  const ForwardOutput lw = out.slice_rows(layout.lw(), layout.labeled);
  const ForwardOutput uw = out.slice_rows(layout.uw(), layout.unlabeled);
  const ForwardOutput uw2 = out.slice_rows(layout.uw2(), layout.unlabeled);
  const ForwardOutput us = out.slice_rows(layout.us(), layout.unlabeled);

  // Closed-set classifier.
  const auto l_x = ce_loss_logits(lw.cc_logits, labels);
  const Mat weak_probs = softmax_rows(uw.cc_logits);
  const auto l_u = consistency_loss_logits(weak_probs, us.cc_logits, hw.tau_pl);

  // Dual gate on the weak unlabeled view.
  const Mat gate_probs =
      cfg.gate_temperature == 1.0 ? weak_probs : softmax_rows(uw.cc_logits, cfg.gate_temperature);
  GateMask gate = dual_gate(gate_probs, uw.ova.id_probs, cfg.tau_id, cfg.eta_id);

  // OOD detector.
  const auto l_ova = ova_loss_with_grad(lw.ova, labels);
  const auto l_em = em_loss_with_grad(uw.ova);
  const auto l_socr = socr_loss_with_grad(uw.ova, uw2.ova, cfg.socr_target);
  const auto l_neg_w = neg_loss_with_grad(uw.ova, hw.eta_neg);
  std::optional<WithGrad<OvaGrad>> l_neg_s;
  if (cfg.neg_both_views) l_neg_s = neg_loss_with_grad(us.ova, hw.eta_neg);
  const double neg = l_neg_w.value + (l_neg_s ? l_neg_s->value : 0.0);

  // Selective non-alignment on the weak projections.
  const EmbeddingBatch lab{lw.z, {labels.begin(), labels.end()}, {}};
  const EmbeddingBatch unl{uw.z, {}, {}};
  const SnaGradResult sna = sna_total_with_grad(lab, unl, protos, gate, cfg.sna);

  LossEval eval;
  const LossReport report = total_loss({l_x.value, l_u.loss},
                                       {l_ova.value, l_em.value, l_socr.value, neg},
                                       sna.report.total, hw);
  eval.loss = report.total;

  const std::size_t rows = layout.rows();
  const std::size_t k = out.cc_logits.cols();
  OutputGrad& g = eval.grad;
  g.d_z = Mat(rows, out.z.cols());
  g.d_cc = Mat(rows, k);
  g.d_id = Mat(rows, k);
  g.d_ood = Mat(rows, k);

  add_block(g.d_cc, layout.lw(), l_x.grad, hw.lambda_cc);
  add_block(g.d_cc, layout.us(), l_u.grad, hw.lambda_cc * hw.lambda_u);

  add_ova(g, layout.lw(), l_ova.grad, hw.lambda_od);
  add_ova(g, layout.uw(), l_em.grad, hw.lambda_od * hw.lambda_em);
  add_ova(g, layout.uw(), l_socr.grad.first, hw.lambda_od * hw.lambda_socr);
  add_ova(g, layout.uw2(), l_socr.grad.second, hw.lambda_od * hw.lambda_socr);
  add_ova(g, layout.uw(), l_neg_w.grad, hw.lambda_od * hw.lambda_neg);
  if (l_neg_s) add_ova(g, layout.us(), l_neg_s->grad, hw.lambda_od * hw.lambda_neg);

  add_block(g.d_z, layout.lw(), sna.d_labeled, hw.lambda_sna);
  add_block(g.d_z, layout.uw(), sna.d_unlabeled, hw.lambda_sna);

  if (diag != nullptr) {
    diag->report = report;
    diag->sna_report = sna.report;
    diag->proto_gate = dual_gate(gate_probs, uw.ova.id_probs, cfg.tau_proto, cfg.eta_proto);
    diag->gate = std::move(gate);
    diag->pl_accepted = l_u.accepted;
    diag->negatives = neg_selected_count(uw.ova, hw.eta_neg);
  }
  return eval;
}

PrototypeSet initial_prototypes(const Network& net, const ParamState& params,
                                const TrainingView& data, const TrainConfig& cfg) {
  const ForwardOutput out = net.forward(params, data.labeled_x);
  const EmbeddingBatch lab{out.z, data.labeled_y, data.labeled_ids};
  const EmbeddingBatch none{Mat(0, out.z.cols()), {}, {}};
  return refresh_prototypes(lab, none, GateMask{}, static_cast<double>(cfg.gamma), cfg.r_u,
                            data.num_classes);
}

TrainResult train(const TrainingView& data, const NetSpec& spec, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  if (cfg.batch_size == 0 || cfg.iters_per_epoch == 0) {
    throw std::invalid_argument("batch_size and iters_per_epoch must be positive");
  }
  if (data.labeled_x.rows() == 0) throw std::invalid_argument("no labeled data");
  if (spec.num_classes != data.num_classes || spec.input_dim != data.labeled_x.cols()) {
    throw std::invalid_argument("network spec does not match the data");
  }
  const Network net(spec);
  TrainResult res;
  res.params = net.init();
  if (cfg.epochs == 0) {
    res.protos = initial_prototypes(net, res.params, data, cfg);
    res.log.initial = audit_of(res.protos, -1);
    return res;
  }
  auto emit = [&](const nlohmann::json& j) {
    if (hooks.stream != nullptr) *hooks.stream << j.dump() << '\n' << std::flush;
  };

  PrototypeSet protos = initial_prototypes(net, res.params, data, cfg);
  res.log.initial = audit_of(protos, -1);
  emit({{"event", "init"}, {"prototypes", audit_json(res.log.initial)}});

  std::mt19937_64 rng(cfg.seed);
  const BatchLayout layout{cfg.batch_size,
                           data.unlabeled_x.rows() == 0 ? 0 : cfg.gamma * cfg.batch_size};
  std::uniform_int_distribution<std::size_t> pick_l(0, data.labeled_x.rows() - 1);
  std::uniform_int_distribution<std::size_t> pick_u(
      0, data.unlabeled_x.rows() == 0 ? 0 : data.unlabeled_x.rows() - 1);
  const auto total_steps = static_cast<std::int64_t>(cfg.epochs * cfg.iters_per_epoch);
  std::optional<LossReport> last_report;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<double> pool;  // gated weak projections, row-major
    std::vector<ClassIndex> pool_class;

    for (std::size_t it = 0; it < cfg.iters_per_epoch; ++it) {
      std::vector<std::size_t> idx_l(layout.labeled), idx_u(layout.unlabeled);
      for (auto& i : idx_l) i = pick_l(rng);
      for (auto& i : idx_u) i = pick_u(rng);
      const Mat xl = data.labeled_x.gather_rows(idx_l);
      const Mat xu = data.unlabeled_x.gather_rows(idx_u);
      std::vector<ClassIndex> labels(layout.labeled);
      for (std::size_t i = 0; i < layout.labeled; ++i) labels[i] = data.labeled_y[idx_l[i]];

      const Mat views[] = {
          augment(xl, AugmentKind::Weak, cfg.augment, rng),
          augment(xl, AugmentKind::Weak2, cfg.augment, rng),
          augment(xl, AugmentKind::Strong, cfg.augment, rng),
          augment(xu, AugmentKind::Weak, cfg.augment, rng),
          augment(xu, AugmentKind::Weak2, cfg.augment, rng),
          augment(xu, AugmentKind::Strong, cfg.augment, rng),
      };
      const Mat batch = vstack(views);

      BatchDiagnostics diag;
      const LossClosure closure = [&](const ForwardOutput& out) {
        return batch_objective(out, layout, labels, protos, cfg, &diag);
      };
      BackwardResult br;
      try {
        br = backward(net, res.params, batch, closure);
      } catch (const std::domain_error& e) {
        throw TrainingAborted(e.what(), last_report);
      }
      const std::int64_t step = res.params.step;
      const double lr = lr_at(step, total_steps, cfg.lr0);
      res.params = sgd_step(std::move(res.params), br.grad, lr, cfg.momentum, cfg.weight_decay);
      if (!all_finite(res.params.params)) {
        throw TrainingAborted("non-finite parameters after step " + std::to_string(step),
                              diag.report);
      }
      last_report = diag.report;

      std::size_t added = 0;
      for (std::size_t i = 0; i < diag.proto_gate.size(); ++i) {
        if (diag.proto_gate.phi[i] != 1) continue;
        auto z = br.out.z.row(layout.uw() + i);
        pool.insert(pool.end(), z.begin(), z.end());
        pool_class.push_back(diag.proto_gate.pred_class[i]);
        ++added;
      }

      IterationRecord rec;
      rec.epoch = static_cast<std::int64_t>(epoch);
      rec.iter = static_cast<std::int64_t>(it);
      rec.step = step;
      rec.lr = lr;
      rec.report = diag.report;
      rec.sna_report = diag.sna_report;
      rec.gate_accepted = diag.gate.accepted();
      rec.pl_accepted = diag.pl_accepted;
      rec.negatives = diag.negatives;
      rec.proto_pool_added = added;
      if (cfg.log_gate_detail) rec.gate = diag.gate;
      emit(to_json(rec));
      res.log.iterations.push_back(std::move(rec));
    }

    // Prototype refresh: full labeled set plus this epoch's gated pool.
    const ForwardOutput lab_out = net.forward(res.params, data.labeled_x);
    const EmbeddingBatch lab{lab_out.z, data.labeled_y, data.labeled_ids};
    const std::size_t d = lab_out.z.cols();
    EmbeddingBatch unl{Mat(pool_class.size(), d, std::move(pool)), {}, {}};
    GateMask all_pass;
    all_pass.phi.assign(pool_class.size(), 1);
    all_pass.pred_class = pool_class;
    all_pass.cc_conf.assign(pool_class.size(), 1.0);
    all_pass.od_conf.assign(pool_class.size(), 1.0);
    protos = refresh_prototypes(lab, unl, all_pass, static_cast<double>(cfg.gamma), cfg.r_u,
                                data.num_classes);

    EpochRecord er;
    er.epoch = static_cast<std::int64_t>(epoch);
    er.audit = audit_of(protos, er.epoch);
    if (cfg.eval_every > 0 && hooks.on_eval && (epoch + 1) % cfg.eval_every == 0) {
      er.metrics = hooks.on_eval(res.params, protos, er.epoch);
    }
    emit(to_json(er));
    res.log.epochs.push_back(std::move(er));
  }
  res.protos = std::move(protos);
  return res;
}

TrainResult train(const Split& split, const NetSpec& spec, const TrainConfig& cfg,
                  OodScoreKind score, std::ostream* stream) {
  TrainHooks hooks;
  hooks.stream = stream;
  const Network net(spec);
  hooks.on_eval = [&](const ParamState& p, const PrototypeSet& protos, std::int64_t) {
    return to_json(
        evaluate(net, p, protos, split.test_x, split.test_cat, split.test_ids, score).report);
  };
  return train(split.training_view(), spec, cfg, hooks);
}

}  // namespace skipalign
