#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace dpl::prompts {

/// One prompt role: a system text plus a user text with {name}
/// placeholders. Templates are plain data files with no logic; repeated
/// or conditional blocks are assembled by the caller and passed in as
/// placeholder values.
struct Template {
    std::string system;
    std::string user;
};

/// Parses a template file with `[system]` and `[user]` section markers.
Template load_template(const std::filesystem::path& file);

/// Substitutes every {name} with values.at(name). Inserted values are
/// taken verbatim and never rescanned. Unknown placeholders and unmatched
/// braces raise.
std::string render(std::string_view text,
                   const std::map<std::string, std::string>& values);

/// All prompt roles, loaded from one directory of versioned files.
struct TemplateSet {
    Template difference_extractor;
    Template summarizer;            // key history + differences
    Template history_summarizer;    // plain review-set summary
    Template recurrent_summarizer;  // running summary + newer block
    Template contrastive_summarizer;
    Template generator;
    Template judge;

    static TemplateSet load(const std::filesystem::path& dir);
};

}  // namespace dpl::prompts
