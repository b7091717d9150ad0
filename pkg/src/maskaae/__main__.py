from maskaae.cli import main

raise SystemExit(main())
