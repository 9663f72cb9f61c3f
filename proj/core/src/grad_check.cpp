#include "hyperpelt/grad_check.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace hyperpelt {

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL") << " tol=" << tol;
    if (!entries.empty()) {
        os << " worst=" << worst_param << " rel_err=" << worst_rel_err;
    }
    return os.str();
}

GradCheckReport grad_check(const LossClosure& closure,
                           const std::vector<NamedTensor>& params,
                           double eps, double tol,
                           const GradTamper& tamper) {
    if (eps <= 0.0) throw contract_error("grad_check: eps must be positive");

    Graph graph;
    Tensor loss = closure(graph);
    {
        Graph probe;
        Tensor loss2 = closure(probe);
        if (loss.numel() != loss2.numel() ||
            std::memcmp(loss.data().data(), loss2.data().data(),
                        loss.numel() * sizeof(float)) != 0) {
            throw determinism_error("grad_check: closure produced differing losses on identical inputs");
        }
    }

    for (const auto& p : params) const_cast<Tensor&>(p.tensor).zero_grad();
    graph.backward(loss);
    if (tamper) {
        for (const auto& p : params) {
            tamper(p.name, const_cast<Tensor&>(p.tensor).grad());
        }
    }

    GradCheckReport report;
    report.tol = tol;
    report.pass = true;
    for (const auto& p : params) {
        GradCheckEntry entry;
        entry.name = p.name;
        const Tensor& t = p.tensor;
        const std::span<const float> g_ad =
            t.has_grad() ? t.impl()->grad : std::span<const float>{};
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double plus = graph.replay_value_f64(loss, t.impl(), i, eps);
            const double minus = graph.replay_value_f64(loss, t.impl(), i, -eps);
            const double fd = (plus - minus) / (2.0 * eps);
            const double ad = g_ad.empty() ? 0.0 : static_cast<double>(g_ad[i]);
            const double rel = std::abs(ad - fd) /
                               std::max({std::abs(ad), std::abs(fd), 1e-8});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_element = i;
            }
        }
        if (entry.max_rel_err > report.worst_rel_err) {
            report.worst_rel_err = entry.max_rel_err;
            report.worst_param = entry.name;
        }
        if (entry.max_rel_err >= tol) report.pass = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace hyperpelt
