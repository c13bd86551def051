import { createApi } from "./api.js";
import { mount } from "./app.js";

const params = new URLSearchParams(window.location.search);
const serviceUrl = params.get("service") ?? "http://127.0.0.1:8099";

mount(createApi(serviceUrl), document);
