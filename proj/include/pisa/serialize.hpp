#pragma once

#include <charconv>
#include <ostream>
#include <string>

#include <json.hpp>

#include "pisa/analysis.hpp"
#include "pisa/router.hpp"

namespace pisa {

// Locale-independent shortest round-trip formatting; CSV and JSON output must
// be byte-identical across runs.
inline std::string fmt_double(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline nlohmann::json plan_to_json(const SelectionPlan& plan) {
    nlohmann::json selected = nlohmann::json::object();
    for (std::size_t i = 0; i < plan.selected.size(); ++i) {
        selected[std::to_string(i)] = plan.selected[i];
    }
    return nlohmann::json{{"num_key_blocks", plan.num_key_blocks},
                          {"k", plan.k},
                          {"strategy", strategy_name(plan.strategy)},
                          {"epsilon", plan.epsilon},
                          {"selected", selected}};
}

inline SelectionPlan plan_from_json(const nlohmann::json& j) {
    SelectionPlan plan;
    plan.num_key_blocks = j.at("num_key_blocks").get<std::size_t>();
    plan.k = j.at("k").get<std::size_t>();
    plan.strategy = j.at("strategy").get<std::string>() == "plain"
                        ? RouterStrategy::Plain
                        : RouterStrategy::CovarianceAware;
    plan.epsilon = j.at("epsilon").get<double>();
    const auto& sel = j.at("selected");
    plan.selected.resize(sel.size());
    for (const auto& [key, val] : sel.items()) {
        plan.selected.at(std::stoul(key)) = val.get<std::vector<std::size_t>>();
    }
    plan.validate();
    return plan;
}

inline void write_histogram_csv(std::ostream& out, const ScoreHistogram& hist) {
    out << "bin_left,bin_right,count_selected,count_unselected\n";
    for (std::size_t i = 0; i < hist.bin_left.size(); ++i) {
        out << fmt_double(hist.bin_left[i]) << ',' << fmt_double(hist.bin_right[i])
            << ',' << hist.count_selected[i] << ',' << hist.count_unselected[i]
            << '\n';
    }
}

}  // namespace pisa
