#pragma once

#include "npc/error.hpp"
#include "npc/json_text.hpp"
#include "npc/tool_schema.hpp"
#include "npc/core_model.hpp"
#include "npc/tool_registry.hpp"
#include "npc/backend_gateway.hpp"
#include "npc/router_engine.hpp"
#include "npc/dataset_toolkit.hpp"
#include "npc/qa_validator.hpp"
#include "npc/eval_harness.hpp"
#include "npc/service.hpp"
#include "npc/http_api.hpp"
