#pragma once

#include "rgrpo/log.hpp"
#include "rgrpo/rubric.hpp"
#include "rgrpo/json_extract.hpp"
#include "rgrpo/chat_client.hpp"
#include "rgrpo/judge.hpp"
#include "rgrpo/policy.hpp"
#include "rgrpo/hash.hpp"
#include "rgrpo/synthetic.hpp"
#include "rgrpo/grpo.hpp"
#include "rgrpo/optimizer.hpp"
#include "rgrpo/trainer.hpp"
#include "rgrpo/datagen.hpp"
#include "rgrpo/config.hpp"
#include "rgrpo/cli.hpp"
