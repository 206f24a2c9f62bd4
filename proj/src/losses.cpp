#include "fundus/losses.hpp"

#include <algorithm>
#include <cmath>

namespace fundus::losses {

void LossConfig::validate() const {
  if (!(epsilon > 0.0)) throw ParamError("loss epsilon must be > 0");
  if (lambda < 0.0) throw ParamError("loss lambda must be >= 0");
  if (mu_max < 0.0) throw ParamError("mu_max must be >= 0");
  if (rampup_steps < 1) throw ParamError("rampup_steps must be >= 1");
}

nlohmann::json LossConfig::to_json() const {
  return nlohmann::json{{"epsilon", epsilon},
                        {"lambda", lambda},
                        {"mu_max", mu_max},
                        {"rampup_steps", rampup_steps},
                        {"global_norm", global_norm}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.lambda = j.value("lambda", c.lambda);
  c.mu_max = j.value("mu_max", c.mu_max);
  c.rampup_steps = j.value("rampup_steps", c.rampup_steps);
  c.global_norm = j.value("global_norm", c.global_norm);
  c.validate();
  return c;
}

void LossBreakdown::accumulate(const LossBreakdown& other) {
  for (int s = 0; s < 2; ++s) {
    charb[s] += other.charb[s];
    edge[s] += other.edge[s];
    cons_enh[s] += other.cons_enh[s];
  }
  for (int v = 0; v < 4; ++v) {
    seg[v] += other.seg[v];
    cons_seg[v] += other.cons_seg[v];
  }
  supervised_total += other.supervised_total;
  consistency_total += other.consistency_total;
}

void LossBreakdown::finalize(double mu_value) {
  mu = mu_value;
  total = total_of(supervised_total, consistency_total, mu_value);
}

nlohmann::json LossBreakdown::to_json() const {
  return nlohmann::json{{"char", charb},
                        {"edge", edge},
                        {"seg", seg},
                        {"cons_enh", cons_enh},
                        {"cons_seg", cons_seg},
                        {"mu", mu},
                        {"supervised_total", supervised_total},
                        {"consistency_total", consistency_total},
                        {"total", total}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  LossBreakdown b;
  j.at("char").get_to(b.charb);
  j.at("edge").get_to(b.edge);
  j.at("seg").get_to(b.seg);
  j.at("cons_enh").get_to(b.cons_enh);
  j.at("cons_seg").get_to(b.cons_seg);
  b.mu = j.at("mu").get<double>();
  b.supervised_total = j.at("supervised_total").get<double>();
  b.consistency_total = j.at("consistency_total").get<double>();
  b.total = j.at("total").get<double>();
  return b;
}

double rampup_mu(long step, long rampup_steps, double mu_max) {
  if (step < 0) throw ParamError("rampup step must be >= 0");
  if (rampup_steps < 1) throw ParamError("rampup_steps must be >= 1");
  const double t = static_cast<double>(std::min(step, rampup_steps)) /
                   static_cast<double>(rampup_steps);
  const double gap = 1.0 - t;
  return mu_max * std::exp(-5.0 * gap * gap);
}

double total_of(double supervised, double consistency, double mu) {
  return supervised + mu * consistency;
}

}  // namespace fundus::losses
